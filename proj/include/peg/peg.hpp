#pragma once

#include <peg/common.hpp>
#include <peg/core.hpp>
#include <peg/estimation.hpp>
#include <peg/uposi.hpp>
#include <peg/lp.hpp>
#include <peg/dscore.hpp>
#include <peg/simlab.hpp>
#include <peg/report.hpp>
