#pragma once

#include "dagman/errors.hpp"
#include "dagman/rng.hpp"
#include "dagman/volume.hpp"
#include "dagman/autograd.hpp"
#include "dagman/window.hpp"
#include "dagman/layers.hpp"
#include "dagman/semantic_attention.hpp"
#include "dagman/encoder.hpp"
#include "dagman/masking.hpp"
#include "dagman/codistill.hpp"
#include "dagman/config.hpp"
#include "dagman/optim.hpp"
#include "dagman/checkpoint.hpp"
#include "dagman/trainer.hpp"
#include "dagman/probe.hpp"
#include "dagman/diagnostics.hpp"
