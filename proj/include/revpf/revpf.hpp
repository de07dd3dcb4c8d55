#pragma once

#include "revpf/errors.hpp"
#include "revpf/model.hpp"
#include "revpf/costmin.hpp"
#include "revpf/simulator.hpp"
#include "revpf/estimator.hpp"
#include "revpf/identlab.hpp"
#include "revpf/io.hpp"
#include "revpf/config.hpp"
#include "revpf/report_json.hpp"
