#include "mmi/bench.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <sstream>
#include <tuple>

#include "mmi/errors.hpp"
#include "mmi/llm.hpp"

namespace mmi::bench {

std::int64_t sequence_tokens(const CostScenario& s) {
  return 2 + s.images * (1 + s.visual_tokens) + s.images * s.text_tokens;
}

FlopBreakdown count_flops(const CostScenario& s) {
  FlopBreakdown f;
  f.tokens = sequence_tokens(s);
  f.overflow = f.tokens > s.context;
  const auto t = static_cast<double>(f.tokens);
  const auto c = static_cast<double>(s.d_model);
  const auto layers = static_cast<double>(s.layers);
  if (s.layers == 0) return f;
  f.self_attn = 2.0 * layers * (4.0 * t * c * c + 2.0 * t * t * c);
  f.ffn = 2.0 * layers * 8.0 * t * c * c;
  f.head = 2.0 * t * c * static_cast<double>(s.vocab);
  const auto synced = static_cast<double>(s.period > 0 ? s.layers / s.period : 0);
  const auto m = static_cast<double>(std::min(s.images, s.max_images));
  const auto l = static_cast<double>(s.levels), k = static_cast<double>(s.points);
  if (s.mmfs) {
    const double per_query = c * c + m * (2.0 * k + l * k) * c + 5.0 * m * l * k * c;
    f.mmfs = 2.0 * synced * t * per_query;
  }
  if (s.dense_cross_attn) {
    const double keys = m * static_cast<double>(s.pyramid_cells);
    f.cross_attn = 2.0 * synced * (2.0 * t * c * c + 2.0 * keys * c * c + 2.0 * t * keys * c);
  }
  return f;
}

CostScenario scale_preset(std::int64_t visual_tokens, bool mmfs) {
  CostScenario s;
  s.variant = (mmfs ? "mmfs" : "nv") + std::to_string(visual_tokens);
  s.visual_tokens = visual_tokens;
  s.mmfs = mmfs;
  return s;
}

std::vector<SweepRow> sweep(const std::vector<CostScenario>& grid) {
  if (grid.empty()) throw EmptyInputError("sweep: empty scenario grid");
  std::vector<SweepRow> rows;
  for (const auto& s : grid) {
    CostScenario base = s;
    base.visual_tokens = 32;
    base.mmfs = false;
    base.dense_cross_attn = false;
    SweepRow row{s, count_flops(s), 0.0};
    row.delta = row.flops.total() - count_flops(base).total();
    rows.push_back(row);
  }
  return rows;
}

std::vector<CostScenario> figure_grid(const std::vector<std::int64_t>& images,
                                      const std::vector<std::int64_t>& text_tokens) {
  std::vector<CostScenario> grid;
  struct Variant {
    const char* name;
    std::int64_t nv;
    bool mmfs, dense;
  };
  for (const Variant v : {Variant{"nv32", 32, false, false}, Variant{"nv256", 256, false, false},
                          Variant{"mmfs32", 32, true, false}, Variant{"dense32", 32, false, true}}) {
    for (auto nt : text_tokens) {
      for (auto ni : images) {
        auto s = scale_preset(v.nv, v.mmfs);
        s.variant = v.name;
        s.dense_cross_attn = v.dense;
        s.images = ni;
        s.text_tokens = nt;
        grid.push_back(s);
      }
    }
  }
  return grid;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out.precision(10);
  out << "variant,visual_tokens,images,text_tokens,tokens,self_attn_gflops,ffn_gflops,mmfs_gflops,"
         "cross_attn_gflops,head_gflops,total_gflops,delta_gflops,overflow\n";
  for (const auto& r : rows) {
    const auto& f = r.flops;
    out << r.scenario.variant << ',' << r.scenario.visual_tokens << ',' << r.scenario.images << ','
        << r.scenario.text_tokens << ',' << f.tokens << ',' << f.self_attn / 1e9 << ',' << f.ffn / 1e9 << ','
        << f.mmfs / 1e9 << ',' << f.cross_attn / 1e9 << ',' << f.head / 1e9 << ',' << f.total() / 1e9 << ','
        << r.delta / 1e9 << ',' << (f.overflow ? "true" : "false") << '\n';
  }
  return out.str();
}

namespace {

std::int64_t max_rss_kb() {
  rusage usage{};
  getrusage(RUSAGE_SELF, &usage);
  return usage.ru_maxrss;
}

}  // namespace

std::vector<RuntimeRow> measure(const std::vector<RuntimeScenario>& scenarios, int repetitions, int warmup,
                                std::uint64_t seed) {
  std::vector<RuntimeRow> rows;
  for (const auto& sc : scenarios) {
    LLMConfig cfg;
    cfg.d_model = sc.d_model;
    cfg.layers = sc.layers;
    cfg.heads = sc.heads;
    cfg.text_vocab = 64;
    cfg.use_mmfs = sc.mmfs;
    cfg.mmfs_every = sc.mmfs_every;
    std::vector<Element> elements;
    for (std::int64_t i = 0; i < sc.images; ++i) {
      elements.push_back(Element::img(i));
      elements.push_back(Element::text(std::vector<std::int64_t>(static_cast<std::size_t>(sc.text_tokens), 1)));
    }
    const auto seq = build(elements, sc.visual_tokens, cfg.vocab());
    cfg.max_context = std::max<std::int64_t>(seq.size(), 2);
    ParamStore<float> store;
    Philox rng(seed);
    CausalLM<float> lm(cfg, store, "", rng);
    std::vector<Tensor<float>> visual;
    std::vector<ImagePyramid<float>> pyramids;
    for (std::int64_t i = 0; i < sc.images; ++i) {
      visual.push_back(Tensor<float>::randn({sc.visual_tokens, sc.d_model}, rng));
      ImagePyramid<float> p;
      for (std::int64_t l = 0; l < cfg.mmfs_levels; ++l) {
        const auto side = std::int64_t{8} >> l;
        p.levels.push_back(Tensor<float>::randn({side, side, sc.d_model}, rng));
      }
      pyramids.push_back(std::move(p));
    }
    std::vector<const ImagePyramid<float>*> ptrs;
    for (const auto& p : pyramids) ptrs.push_back(&p);
    NoGradGuard no_grad;
    std::vector<double> times;
    for (int r = 0; r < warmup + repetitions; ++r) {
      const auto start = std::chrono::steady_clock::now();
      const auto out = lm.forward(seq, visual, ptrs);
      const auto stop = std::chrono::steady_clock::now();
      if (r >= warmup) times.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
    }
    std::sort(times.begin(), times.end());
    const auto n = times.size();
    const double median = n == 0 ? 0.0 : (n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]));
    rows.push_back({sc.name, seq.size(), median, max_rss_kb()});
  }
  return rows;
}

std::string runtime_csv(const std::vector<RuntimeRow>& rows) {
  std::ostringstream out;
  out.precision(6);
  out << "name,tokens,median_ms,max_rss_kb\n";
  for (const auto& r : rows) out << r.name << ',' << r.tokens << ',' << r.median_ms << ',' << r.max_rss_kb << '\n';
  return out.str();
}

namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

}  // namespace

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series) {
  constexpr double width = 640, height = 420, left = 80, right = 160, top = 40, bottom = 60;
  double x0 = 1e300, x1 = -1e300, y0 = 0, y1 = -1e300;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x0 > x1) x0 = 0, x1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  const double pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream out;
  out.precision(6);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
      << "</text>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    out << "<text x=\"" << px(xv) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << xv << "</text>\n";
    out << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
  }
  out << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 15 << "\" text-anchor=\"middle\">" << escape(x_label)
      << "</text>\n";
  out << "<text x=\"18\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << top + ph / 2 << ")\">" << escape(y_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto* color = colors[i % std::size(colors)];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : series[i].points) out << px(x) << ',' << py(y) << ' ';
    out << "\"/>\n";
    for (const auto& [x, y] : series[i].points) {
      out << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    const double ly = top + 10 + 18.0 * static_cast<double>(i);
    out << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 32 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly + 4 << "\">" << escape(series[i].name) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace mmi::bench
