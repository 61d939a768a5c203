#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "geopeft/model.hpp"
#include "primitive_suite.hpp"

namespace geopeft::testing {

inline std::vector<std::string> band_list(std::size_t n) {
    static const std::vector<std::string> all = {"B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12"};
    return {all.begin(), all.begin() + static_cast<long>(n)};
}

inline BackboneConfig tiny_backbone(std::size_t bands = 6, std::size_t extent = 32, std::size_t patch = 8) {
    BackboneConfig c;
    c.embed_dim = 32;
    c.depth = 4;
    c.heads = 4;
    c.patch_size = patch;
    c.band_ids = band_list(bands);
    c.image_h = c.image_w = extent;
    return c;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - b.data()[i]));
    return m;
}

}  // namespace geopeft::testing
