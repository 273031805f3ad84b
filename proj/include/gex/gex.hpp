#pragma once

#include "gex/analysis.hpp"
#include "gex/checkpoint.hpp"
#include "gex/config.hpp"
#include "gex/cost.hpp"
#include "gex/data.hpp"
#include "gex/ge.hpp"
#include "gex/gradcheck.hpp"
#include "gex/model.hpp"
#include "gex/nn.hpp"
#include "gex/ops.hpp"
#include "gex/tensor.hpp"
#include "gex/train.hpp"
