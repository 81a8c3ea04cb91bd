#ifndef MPUNET_MPUNET_HPP
#define MPUNET_MPUNET_HPP

#include "mpunet/augment.hpp"
#include "mpunet/core/error.hpp"
#include "mpunet/core/quantile.hpp"
#include "mpunet/core/rng.hpp"
#include "mpunet/core/vec3.hpp"
#include "mpunet/evalstats.hpp"
#include "mpunet/fusion.hpp"
#include "mpunet/multiplanar.hpp"
#include "mpunet/nn/adam.hpp"
#include "mpunet/nn/checkpoint.hpp"
#include "mpunet/nn/gradcheck.hpp"
#include "mpunet/nn/graph.hpp"
#include "mpunet/nn/loss.hpp"
#include "mpunet/nn/ops.hpp"
#include "mpunet/nn/tensor.hpp"
#include "mpunet/phantom.hpp"
#include "mpunet/pipeline/config.hpp"
#include "mpunet/pipeline/dataset.hpp"
#include "mpunet/pipeline/experiment.hpp"
#include "mpunet/pipeline/training.hpp"
#include "mpunet/preprocess.hpp"
#include "mpunet/unetzoo.hpp"
#include "mpunet/volume.hpp"
#include "mpunet/volume_io.hpp"

#endif // MPUNET_MPUNET_HPP
