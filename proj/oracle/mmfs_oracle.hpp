#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "oracle/numcore_oracle.hpp"

namespace mmi::oracle {

struct MMFSWeights {
  Vec wq, bq, wp, bp, wa, ba, pos;
  std::int64_t dq = 0, f = 0, heads = 1, levels = 1, points = 1;
};

struct Plan {
  Vec loc;  // [M][heads][K][2]
  Vec w;    // [heads][M][L][K]
};

// Plan for one query f_q over M images, most recent image last.
inline Plan mmfs_plan(const MMFSWeights& p, const Vec& fq, double u, double v, std::int64_t m_count) {
  const auto f = p.f, h = p.heads, l = p.levels, k = p.points;
  Vec base(static_cast<std::size_t>(f));
  for (std::int64_t o = 0; o < f; ++o) {
    double acc = p.bq[o];
    for (std::int64_t i = 0; i < p.dq; ++i) acc += p.wq[o * p.dq + i] * fq[i];
    base[o] = acc;
  }
  Plan plan;
  plan.loc.assign(static_cast<std::size_t>(m_count * h * k * 2), 0.0);
  plan.w.assign(static_cast<std::size_t>(h * m_count * l * k), 0.0);
  Vec logits(plan.w.size());
  for (std::int64_t m = 0; m < m_count; ++m) {
    const auto rank = m_count - 1 - m;
    Vec q(static_cast<std::size_t>(f));
    for (std::int64_t o = 0; o < f; ++o) q[o] = base[o] + p.pos[rank * f + o];
    for (std::int64_t hh = 0; hh < h; ++hh) {
      for (std::int64_t kk = 0; kk < k; ++kk) {
        for (std::int64_t axis = 0; axis < 2; ++axis) {
          const auto row = (hh * k + kk) * 2 + axis;
          double off = p.bp[row];
          for (std::int64_t i = 0; i < f; ++i) off += p.wp[row * f + i] * q[i];
          plan.loc[((m * h + hh) * k + kk) * 2 + axis] = (axis == 0 ? u : v) + off;
        }
      }
      for (std::int64_t ll = 0; ll < l; ++ll) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
          const auto row = (hh * l + ll) * k + kk;
          double z = p.ba[row];
          for (std::int64_t i = 0; i < f; ++i) z += p.wa[row * f + i] * q[i];
          logits[((hh * m_count + m) * l + ll) * k + kk] = z;
        }
      }
    }
  }
  const auto per_head = m_count * l * k;
  for (std::int64_t hh = 0; hh < h; ++hh) {
    const Vec slice(logits.begin() + hh * per_head, logits.begin() + (hh + 1) * per_head);
    const Vec probs = softmax(slice);
    for (std::int64_t i = 0; i < per_head; ++i) plan.w[hh * per_head + i] = probs[i];
  }
  return plan;
}

struct Map {
  Vec values;
  std::int64_t h = 0, w = 0;
};

// f_o = Σ_{m,l,k} A[m,l,k]·bilinear(level l of image m, p[m,k]) per head.
inline Vec mmfs_sample(const std::vector<std::vector<Map>>& images, std::int64_t c, std::int64_t heads,
                       std::int64_t points, const Plan& plan) {
  const auto m_count = static_cast<std::int64_t>(images.size());
  const auto l_count = static_cast<std::int64_t>(images[0].size());
  const auto hc = c / heads;
  Vec out(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t hh = 0; hh < heads; ++hh) {
    for (std::int64_t m = 0; m < m_count; ++m) {
      for (std::int64_t l = 0; l < l_count; ++l) {
        const auto& map = images[m][l];
        for (std::int64_t k = 0; k < points; ++k) {
          const auto li = ((m * heads + hh) * points + k) * 2;
          const Vec s = bilinear(map.values, map.h, map.w, c, plan.loc[li], plan.loc[li + 1]);
          const double a = plan.w[((hh * m_count + m) * l_count + l) * points + k];
          for (std::int64_t j = 0; j < hc; ++j) out[hh * hc + j] += a * s[hh * hc + j];
        }
      }
    }
  }
  return out;
}

}  // namespace mmi::oracle
