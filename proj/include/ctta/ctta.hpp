#pragma once

#include "autodiff.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "engine.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "optimizer.hpp"
#include "pipeline.hpp"
#include "prototypes.hpp"
#include "random.hpp"
#include "streams.hpp"
#include "tensor.hpp"
#include "training.hpp"
