#pragma once

// Umbrella header for the full pipeline.

#include "geodiffussr/autograd.hpp"
#include "geodiffussr/container.hpp"
#include "geodiffussr/data.hpp"
#include "geodiffussr/dem_encoder.hpp"
#include "geodiffussr/flow.hpp"
#include "geodiffussr/metrics.hpp"
#include "geodiffussr/nn.hpp"
#include "geodiffussr/png_io.hpp"
#include "geodiffussr/render.hpp"
#include "geodiffussr/rng.hpp"
#include "geodiffussr/tensor.hpp"
#include "geodiffussr/text.hpp"
#include "geodiffussr/tile.hpp"
#include "geodiffussr/trainer.hpp"
#include "geodiffussr/unet.hpp"
