#pragma once

#include "srom/core.hpp"
#include "srom/dataset.hpp"
#include "srom/spod.hpp"
#include "srom/projection.hpp"
#include "srom/pruning.hpp"
#include "srom/nn.hpp"
#include "srom/autoencoder.hpp"
#include "srom/forecaster.hpp"
#include "srom/scalar_map.hpp"
#include "srom/pipeline.hpp"
