#pragma once

#include "bdtk/common.hpp"
#include "bdtk/rng.hpp"
#include "bdtk/tensor.hpp"
#include "bdtk/io.hpp"
#include "bdtk/dataset.hpp"
#include "bdtk/trigger.hpp"
#include "bdtk/nn.hpp"
#include "bdtk/loss.hpp"
#include "bdtk/model.hpp"
#include "bdtk/optim.hpp"
#include "bdtk/train.hpp"
#include "bdtk/attacks.hpp"
#include "bdtk/inversion.hpp"
#include "bdtk/purification.hpp"
#include "bdtk/evaluation.hpp"
#include "bdtk/config.hpp"
#include "bdtk/pipeline.hpp"
