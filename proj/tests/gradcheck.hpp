#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "debias/model.hpp"

namespace gradcheck {

struct Result {
    double max_rel = 0.0;
    std::string worst_block;
    std::size_t checked = 0;
};

using LossFn = std::function<std::pair<double, debias::TapGradients>(const debias::TapOutputs&)>;

inline std::vector<std::string> block_names(const debias::NetworkParams& p) {
    std::vector<std::string> names;
    for (int b = 1; b <= 4; ++b) {
        names.push_back("block" + std::to_string(b) + ".weight");
        names.push_back("block" + std::to_string(b) + ".bias");
    }
    for (std::size_t i = 0; i < p.branches.size(); ++i) {
        names.push_back("align" + std::to_string(i) + ".weight");
        names.push_back("align" + std::to_string(i) + ".bias");
        names.push_back("shallow_classifier" + std::to_string(i) + ".weight");
        names.push_back("shallow_classifier" + std::to_string(i) + ".bias");
    }
    names.push_back("deep_classifier.weight");
    names.push_back("deep_classifier.bias");
    return names;
}

// Central differences over every parameter entry. Relative error per entry is
// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline Result check(const debias::NetworkConfig& config, debias::NetworkParams params, const debias::Matrix& x,
                    const LossFn& loss, double h = 1e-5, double floor = 1e-6) {
    const auto trace = debias::forward_trace(config, params, x);
    const auto analytic = debias::backward(config, params, trace, loss(trace.taps).second);

    std::vector<const std::vector<double>*> grads;
    debias::for_each_array(analytic, [&](const std::vector<double>& v) { grads.push_back(&v); });
    std::vector<std::vector<double>*> arrays;
    debias::for_each_array(params, [&](std::vector<double>& v) { arrays.push_back(&v); });
    const auto names = block_names(params);

    Result r;
    for (std::size_t a = 0; a < arrays.size(); ++a) {
        auto& arr = *arrays[a];
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const double keep = arr[i];
            arr[i] = keep + h;
            const double up = loss(debias::forward(config, params, x)).first;
            arr[i] = keep - h;
            const double down = loss(debias::forward(config, params, x)).first;
            arr[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double an = (*grads[a])[i];
            const double rel = std::abs(an - numeric) / std::max({std::abs(an), std::abs(numeric), floor});
            ++r.checked;
            if (rel > r.max_rel) {
                r.max_rel = rel;
                r.worst_block = names[a];
            }
        }
    }
    return r;
}

}  // namespace gradcheck
