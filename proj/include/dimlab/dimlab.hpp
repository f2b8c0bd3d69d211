#pragma once

#include "dimlab/errors.hpp"
#include "dimlab/rng.hpp"
#include "dimlab/tensor.hpp"
#include "dimlab/gradcheck.hpp"
#include "dimlab/losses.hpp"
#include "dimlab/model.hpp"
#include "dimlab/data.hpp"
#include "dimlab/optim.hpp"
#include "dimlab/training.hpp"
#include "dimlab/evaluation.hpp"
#include "dimlab/analysis.hpp"
#include "dimlab/experiment.hpp"
#include "dimlab/verify.hpp"
