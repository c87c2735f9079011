#pragma once

#include "fewseg/autograd.hpp"
#include "fewseg/config.hpp"
#include "fewseg/core.hpp"
#include "fewseg/correlation.hpp"
#include "fewseg/data.hpp"
#include "fewseg/episodic.hpp"
#include "fewseg/eval.hpp"
#include "fewseg/io.hpp"
#include "fewseg/losses.hpp"
#include "fewseg/network.hpp"
#include "fewseg/ops.hpp"
#include "fewseg/parallel.hpp"
#include "fewseg/random.hpp"
#include "fewseg/tensor.hpp"
