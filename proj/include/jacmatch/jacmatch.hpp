#pragma once

#include "jacmatch/tensor.hpp"
#include "jacmatch/rng.hpp"
#include "jacmatch/autodiff.hpp"
#include "jacmatch/diffusion.hpp"
#include "jacmatch/scorenet.hpp"
#include "jacmatch/checkpoint.hpp"
#include "jacmatch/data.hpp"
#include "jacmatch/metrics.hpp"
#include "jacmatch/losses.hpp"
#include "jacmatch/ftle.hpp"
#include "jacmatch/pruning.hpp"
#include "jacmatch/optim.hpp"
#include "jacmatch/config.hpp"
#include "jacmatch/training.hpp"
#include "jacmatch/experiment.hpp"
