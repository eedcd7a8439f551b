#pragma once

#include "dcst/diffcore/array.hpp"
#include "dcst/diffcore/errors.hpp"
#include "dcst/diffcore/grad_check.hpp"
#include "dcst/diffcore/nn.hpp"
#include "dcst/diffcore/ops.hpp"
#include "dcst/diffcore/optim.hpp"
#include "dcst/diffcore/parameter.hpp"
#include "dcst/diffcore/rng.hpp"
#include "dcst/diffcore/tape.hpp"
