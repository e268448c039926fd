#pragma once

#include "wavemix/bench.hpp"
#include "wavemix/checkpoint.hpp"
#include "wavemix/conv.hpp"
#include "wavemix/cost.hpp"
#include "wavemix/data.hpp"
#include "wavemix/errors.hpp"
#include "wavemix/grad_check.hpp"
#include "wavemix/losses.hpp"
#include "wavemix/metrics.hpp"
#include "wavemix/model.hpp"
#include "wavemix/model_spec.hpp"
#include "wavemix/nn.hpp"
#include "wavemix/ops.hpp"
#include "wavemix/optim.hpp"
#include "wavemix/run_config.hpp"
#include "wavemix/tensor.hpp"
#include "wavemix/train.hpp"
#include "wavemix/wavelet.hpp"
