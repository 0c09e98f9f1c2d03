#ifndef DV_FRAMEPACK_HPP
#define DV_FRAMEPACK_HPP

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace dv {

// Token-count descriptor for one example: caption tokens followed by a
// (t_lat, gh, gw) grid of vision tokens.
struct PackExample {
    int64_t text_len = 0;
    int64_t t_lat = 0;
    int64_t gh = 0;
    int64_t gw = 0;

    int64_t vision_tokens() const { return t_lat * gh * gw; }
    int64_t total_tokens() const { return text_len + vision_tokens(); }
};

struct PackedRow {
    std::vector<int64_t> order;  // original example indices, placement order
    int64_t used = 0;
};

struct PackedBatch {
    int64_t L_max = 0;
    std::vector<PackedRow> rows;
    int64_t waste = 0;

    double waste_frac() const {
        return rows.empty() ? 0.0 : (double)waste / (double)((int64_t)rows.size() * L_max);
    }
};

// First-fit decreasing: sort by token count descending (ties keep original
// order), then drop each example into the first row with room.
inline PackedBatch pack(const std::vector<PackExample>& examples, int64_t L_max) {
    PackedBatch out;
    out.L_max = L_max;
    std::vector<int64_t> idx(examples.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
        return examples[(size_t)a].total_tokens() > examples[(size_t)b].total_tokens();
    });
    for (int64_t i : idx) {
        const int64_t need = examples[(size_t)i].total_tokens();
        check(need <= L_max,
              "pack: example " + std::to_string(i) + " needs " + std::to_string(need) +
                  " tokens, capacity is " + std::to_string(L_max));
        check(need > 0, "pack: example " + std::to_string(i) + " is empty");
        bool placed = false;
        for (auto& row : out.rows) {
            if (row.used + need <= L_max) {
                row.order.push_back(i);
                row.used += need;
                placed = true;
                break;
            }
        }
        if (!placed) {
            PackedRow row;
            row.order.push_back(i);
            row.used = need;
            out.rows.push_back(std::move(row));
        }
    }
    for (const auto& row : out.rows) out.waste += L_max - row.used;
    return out;
}

// Per-token view of one packed row, padded to L_max. Padding slots carry
// example_id -1 and zero loss weight; text tokens carry no coordinates and
// zero loss weight; vision tokens of an example share weight
// 1/vision_tokens so every example contributes equally to the loss.
struct RowLayout {
    std::vector<int64_t> example_id;               // -1 for padding
    std::vector<uint8_t> is_text;                  // 1 on caption tokens
    std::vector<std::array<int64_t, 3>> coords;    // (t,y,x); (-1,-1,-1) off-grid
    std::vector<double> loss_w;
    std::vector<int64_t> starts;                   // slot offset per placed example
    int64_t used = 0;
};

inline RowLayout row_layout(const PackedBatch& b, size_t row,
                            const std::vector<PackExample>& examples) {
    check(row < b.rows.size(), "row_layout: row out of range");
    RowLayout lay;
    lay.example_id.assign((size_t)b.L_max, -1);
    lay.is_text.assign((size_t)b.L_max, 0);
    lay.coords.assign((size_t)b.L_max, {-1, -1, -1});
    lay.loss_w.assign((size_t)b.L_max, 0.0);
    int64_t at = 0;
    for (int64_t ei : b.rows[row].order) {
        const PackExample& e = examples[(size_t)ei];
        lay.starts.push_back(at);
        for (int64_t k = 0; k < e.text_len; ++k) {
            lay.example_id[(size_t)at] = ei;
            lay.is_text[(size_t)at] = 1;
            ++at;
        }
        const double w = 1.0 / (double)e.vision_tokens();
        // coordinates restart at the example origin regardless of row offset
        for (int64_t t = 0; t < e.t_lat; ++t)
            for (int64_t y = 0; y < e.gh; ++y)
                for (int64_t x = 0; x < e.gw; ++x) {
                    lay.example_id[(size_t)at] = ei;
                    lay.coords[(size_t)at] = {t, y, x};
                    lay.loss_w[(size_t)at] = w;
                    ++at;
                }
    }
    lay.used = at;
    check(at == b.rows[row].used, "row_layout: bookkeeping mismatch");
    return lay;
}

// mask[i][j] = 0 iff tokens i and j belong to the same example and neither
// is padding; -inf otherwise. Length may be the padded row or just the used
// prefix, depending on the example_id slice passed in.
inline Tensor build_mask(const std::vector<int64_t>& example_id) {
    const int64_t L = (int64_t)example_id.size();
    const float ninf = -std::numeric_limits<float>::infinity();
    Tensor mask({L, L}, ninf);
    for (int64_t i = 0; i < L; ++i) {
        if (example_id[(size_t)i] < 0) continue;
        for (int64_t j = 0; j < L; ++j)
            if (example_id[(size_t)j] == example_id[(size_t)i]) mask.at2(i, j) = 0.0f;
    }
    return mask;
}

inline std::string pack_stats_line(const PackedBatch& b, int64_t n_examples) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%lld, %lld, %.6f", (long long)b.rows.size(),
                  (long long)n_examples, b.waste_frac());
    return std::string(buf);
}

}  // namespace dv

#endif
