#ifndef MEMESCOPE_MEMESCOPE_HPP_
#define MEMESCOPE_MEMESCOPE_HPP_

#include "memescope/analytics.hpp"
#include "memescope/convnet.hpp"
#include "memescope/core.hpp"
#include "memescope/deepcluster.hpp"
#include "memescope/detector.hpp"
#include "memescope/image.hpp"
#include "memescope/kmeans.hpp"
#include "memescope/linalg.hpp"
#include "memescope/manifest.hpp"
#include "memescope/matrix.hpp"
#include "memescope/memefilter.hpp"
#include "memescope/pipeline/config.hpp"
#include "memescope/pipeline/server.hpp"
#include "memescope/pipeline/stages.hpp"
#include "memescope/pipeline/state.hpp"
#include "memescope/synth.hpp"
#include "memescope/tsne.hpp"

#endif
