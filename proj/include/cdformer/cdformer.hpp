#pragma once

#include "cdformer/ablation.hpp"
#include "cdformer/adam.hpp"
#include "cdformer/binary_io.hpp"
#include "cdformer/boxes.hpp"
#include "cdformer/checkpoint.hpp"
#include "cdformer/config.hpp"
#include "cdformer/episode.hpp"
#include "cdformer/episode_io.hpp"
#include "cdformer/error.hpp"
#include "cdformer/gradcheck.hpp"
#include "cdformer/gradcheck_suite.hpp"
#include "cdformer/harness.hpp"
#include "cdformer/hungarian.hpp"
#include "cdformer/metrics.hpp"
#include "cdformer/model.hpp"
#include "cdformer/nn.hpp"
#include "cdformer/obd.hpp"
#include "cdformer/ood.hpp"
#include "cdformer/ops.hpp"
#include "cdformer/report.hpp"
#include "cdformer/serialize.hpp"
#include "cdformer/set_head.hpp"
#include "cdformer/tensor.hpp"
