#pragma once

/// @file iapc.hpp
/// Umbrella header for the adaptation toolkit.

#include "iapc/common.hpp"
#include "iapc/prob.hpp"
#include "iapc/image_io.hpp"
#include "iapc/data_synth.hpp"
#include "iapc/dataset_io.hpp"
#include "iapc/segmodel.hpp"
#include "iapc/edik.hpp"
#include "iapc/ldsk.hpp"
#include "iapc/evalkit.hpp"
#include "iapc/trainer.hpp"
