#pragma once

#include "saor/diffcore/checkpoint.hpp"
#include "saor/diffcore/image_ops.hpp"
#include "saor/diffcore/ops.hpp"
#include "saor/diffcore/param_store.hpp"
#include "saor/diffcore/tensor.hpp"
