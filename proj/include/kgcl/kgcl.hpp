#pragma once

#include "kgcl/continual.hpp"
#include "kgcl/dataset.hpp"
#include "kgcl/error.hpp"
#include "kgcl/eval.hpp"
#include "kgcl/harness.hpp"
#include "kgcl/optim.hpp"
#include "kgcl/random.hpp"
#include "kgcl/synthetic.hpp"
#include "kgcl/transe.hpp"
