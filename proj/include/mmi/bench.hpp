#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace mmi::bench {

/// One LLM workload: N_i images of N_v visual tokens, each followed by N_t
/// text tokens, wrapped in BoS/EoS with one BoI per image.
struct CostScenario {
  std::string variant = "custom";
  std::int64_t d_model = 5120;
  std::int64_t layers = 40;
  std::int64_t vocab = 32000;
  std::int64_t visual_tokens = 32;  // N_v
  std::int64_t images = 1;          // N_i
  std::int64_t text_tokens = 256;   // N_t per image
  bool mmfs = false;
  bool dense_cross_attn = false;  // dense attention over all pyramid cells instead of MMFS
  std::int64_t max_images = 4;    // M̄
  std::int64_t levels = 3;        // L
  std::int64_t points = 4;        // K
  std::int64_t period = 4;        // one MMFS / cross-attention layer every `period` layers
  std::int64_t pyramid_cells = 261;  // keys per image for the dense variant (14² + 7² + 4²)
  std::int64_t context = 2048;
};

/// FLOPs per component (2 per multiply-accumulate).
struct FlopBreakdown {
  double self_attn = 0, ffn = 0, mmfs = 0, cross_attn = 0, head = 0;
  std::int64_t tokens = 0;
  bool overflow = false;  // tokens > context
  [[nodiscard]] double total() const { return self_attn + ffn + mmfs + cross_attn + head; }
  [[nodiscard]] double llm() const { return self_attn + ffn + head; }
};

/// T = 2 + N_i·(1 + N_v) + N_i·N_t.
std::int64_t sequence_tokens(const CostScenario& s);

/// Per layer, with T tokens and width C (multiply-accumulates):
///   self-attention  4·T·C² + 2·T²·C
///   feed-forward    8·T·C²
///   head            T·C·V, once
/// and on every period-th layer, with M = min(N_i, M̄):
///   MMFS            per query C² (W_q) + M·(2K + L·K)·C (offsets, weights)
///                   + 5·M·L·K·C (four bilinear taps and the weighted sum)
///   dense cross     T·C² + 2·M·S·C² + T·C² (Q, K/V, out) + 2·T·M·S·C,
///                   S = pyramid cells per image
FlopBreakdown count_flops(const CostScenario& s);

/// The 13B-scale configuration: C = 5120, 40 layers, 32000-token vocabulary,
/// one image with 256 text tokens, MMFS every 4th layer over 3 levels × 4
/// points.
CostScenario scale_preset(std::int64_t visual_tokens, bool mmfs);

struct SweepRow {
  CostScenario scenario;
  FlopBreakdown flops;
  double delta = 0;  // total − total of the N_v = 32 no-MMFS scenario with the same N_i, N_t
};

/// Throws EmptyInputError for an empty grid.
std::vector<SweepRow> sweep(const std::vector<CostScenario>& grid);

/// Variants nv32, nv256 (no MMFS), mmfs32, dense32 over N_i ∈ images and
/// N_t ∈ text_tokens, on the full-scale preset dimensions.
std::vector<CostScenario> figure_grid(const std::vector<std::int64_t>& images = {1, 2, 3, 4, 5, 6, 7, 8},
                                      const std::vector<std::int64_t>& text_tokens = {32, 128, 256});

/// Header: variant,visual_tokens,images,text_tokens,tokens,self_attn_gflops,
/// ffn_gflops,mmfs_gflops,cross_attn_gflops,head_gflops,total_gflops,
/// delta_gflops,overflow
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// A toy LLM forward pass to time.
struct RuntimeScenario {
  std::string name;
  std::int64_t d_model = 64;
  std::int64_t layers = 4;
  std::int64_t heads = 4;
  std::int64_t visual_tokens = 32;
  std::int64_t images = 2;
  std::int64_t text_tokens = 32;
  bool mmfs = true;
  std::int64_t mmfs_every = 4;
};

struct RuntimeRow {
  std::string name;
  std::int64_t tokens = 0;
  double median_ms = 0;
  std::int64_t max_rss_kb = 0;  // process high-water mark after the runs
};

/// Median wall time of `repetitions` forward passes after `warmup` untimed
/// ones, per scenario, run serially.
std::vector<RuntimeRow> measure(const std::vector<RuntimeScenario>& scenarios, int repetitions = 5, int warmup = 1,
                                std::uint64_t seed = 0);

/// Header: name,tokens,median_ms,max_rss_kb
std::string runtime_csv(const std::vector<RuntimeRow>& rows);

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

/// Self-contained SVG line chart with labeled axes and a legend.
std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series);

}  // namespace mmi::bench
