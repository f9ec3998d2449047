#pragma once

#include "motormeta/adapt.hpp"
#include "motormeta/config.hpp"
#include "motormeta/dataset_io.hpp"
#include "motormeta/episodes.hpp"
#include "motormeta/error.hpp"
#include "motormeta/evaluation.hpp"
#include "motormeta/imaging.hpp"
#include "motormeta/metalearn.hpp"
#include "motormeta/net/backbone.hpp"
#include "motormeta/net/checkpoint.hpp"
#include "motormeta/net/loss.hpp"
#include "motormeta/net/optim.hpp"
#include "motormeta/net/tensor.hpp"
#include "motormeta/pipeline.hpp"
#include "motormeta/rng.hpp"
#include "motormeta/signalgen.hpp"
