#pragma once

#include "cpra/tensor.hpp"
#include "cpra/fft.hpp"
#include "cpra/kernels.hpp"
#include "cpra/autograd.hpp"
#include "cpra/ops.hpp"
#include "cpra/params.hpp"
#include "cpra/context.hpp"
#include "cpra/attention.hpp"
#include "cpra/fusion.hpp"
#include "cpra/ffn.hpp"
#include "cpra/network.hpp"
#include "cpra/imaging.hpp"
#include "cpra/gradcheck.hpp"
#include "cpra/training.hpp"
#include "cpra/reports.hpp"
