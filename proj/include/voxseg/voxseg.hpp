#pragma once

#include "voxseg/clustering.hpp"
#include "voxseg/cnn.hpp"
#include "voxseg/dictseg.hpp"
#include "voxseg/error.hpp"
#include "voxseg/grid.hpp"
#include "voxseg/io.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/morphology.hpp"
#include "voxseg/patches.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/pipeline.hpp"
#include "voxseg/preprocess.hpp"
#include "voxseg/rng.hpp"
