#pragma once

#include "capsconv/errors.hpp"
#include "capsconv/tensor.hpp"
#include "capsconv/parallel.hpp"
#include "capsconv/reference.hpp"
#include "capsconv/lowering.hpp"
#include "capsconv/index_table.hpp"
#include "capsconv/random.hpp"
#include "capsconv/capsnet.hpp"
#include "capsconv/compare.hpp"
#include "capsconv/config.hpp"
#include "capsconv/check.hpp"
#include "capsconv/bench.hpp"
