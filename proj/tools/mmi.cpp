// mmi: self-tests, toy training, generation, benchmarks and ablations.
//
// Exit codes: 0 success, 1 a check or ablation criterion failed, 2 usage or
// configuration error, 3 file error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmi/bench.hpp"
#include "mmi/config.hpp"
#include "mmi/errors.hpp"
#include "mmi/pipeline.hpp"
#include "mmi/pyramid.hpp"
#include "mmi/tasks.hpp"
#include "oracle/checks.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mmi;

namespace {

constexpr int kOk = 0, kFailed = 1, kUsage = 2, kIo = 3;

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_file, "key=value config file (default: $MMI_CONFIG)");
  app->add_option("-s,--set", c.sets, "override one config key, key=value (repeatable)");
  app->add_option("--seed", c.seed, "random seed (overrides the config key)");
}

// File, then environment default, then --set, then --seed.
RunConfig load_config(const Common& c, RunConfig base = {}) {
  std::string path = c.config_file;
  if (path.empty()) {
    if (const char* env = std::getenv(kConfigEnv); env && *env) path = env;
  }
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    std::stringstream text;
    text << in.rdbuf();
    base.merge_text(text.str(), path);
  }
  for (const auto& s : c.sets) base.set_assignment(s);
  if (c.seed >= 0) base.set("seed", std::to_string(c.seed));
  return base;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

double ms_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

// ---------------------------------------------------------------- selftest

int cmd_selftest(const Common& common, const std::vector<std::string>& filters, bool full) {
  checks::Options options{load_config(common), !full};
  json report;
  report["suite"] = "invariant";
  report["mode"] = full ? "full" : "quick";
  report["checks"] = json::array();
  json failures = json::array();
  std::set<std::string> modules;
  bool all = true;
  for (const auto& check : checks::registry()) {
    if (check.suite != checks::Suite::Invariant) continue;
    if (!filters.empty()) {
      const bool hit = std::any_of(filters.begin(), filters.end(), [&](const std::string& f) {
        return check.module == f || check.id == f || check.id.rfind(f + ".", 0) == 0;
      });
      if (!hit) continue;
    }
    const auto start = std::chrono::steady_clock::now();
    const auto r = checks::run_check(check, options);
    const double ms = ms_since(start);
    std::cerr << (r.pass ? "pass " : "FAIL ") << r.id << "  " << r.detail << "\n";
    json entry{{"id", r.id},           {"module", r.module},     {"pass", r.pass},
               {"detail", r.detail},   {"wall_ms", ms},          {"criterion", check.criterion}};
    entry["metric"] = std::isfinite(r.metric) ? json(r.metric) : json(nullptr);
    entry["tolerance"] = std::isfinite(r.tolerance) ? json(r.tolerance) : json(nullptr);
    report["checks"].push_back(entry);
    modules.insert(r.module);
    if (!r.pass) {
      all = false;
      failures.push_back({{"id", r.id}, {"module", r.module}, {"detail", r.detail}});
    }
  }
  if (report["checks"].empty()) throw ConfigError("--filter matched no checks");
  report["modules"] = json(std::vector<std::string>(modules.begin(), modules.end()));
  report["failures"] = failures;
  report["passed"] = all;
  std::cout << report.dump(2) << "\n";
  return all ? kOk : kFailed;
}

// ---------------------------------------------------------------- train

struct TrainFlags {
  std::string out_dir;
  std::string resume;
  bool no_mmfs_decoder = false;
};

Checkpoint make_checkpoint(const RunConfig& config, std::vector<std::pair<std::string, Tensor<float>>> tensors) {
  return {config.values(), std::move(tensors)};
}

int train_sequences(RunConfig config, const TrainFlags& flags, const std::string& task) {
  Checkpoint resume;
  if (!flags.resume.empty()) resume = read_checkpoint(flags.resume);
  const auto model_cfg = config.model();
  const auto train_cfg = config.train();
  const auto seed = static_cast<std::uint64_t>(config.get_int("seed"));
  Model<float> model(model_cfg, seed);
  Trainer<float> trainer(model, train_cfg);
  if (!flags.resume.empty()) {
    load_params(resume, model.params());
    std::vector<std::pair<std::string, Tensor<float>>> state;
    for (const auto& [name, t] : resume.tensors) {
      if (name.rfind("opt.", 0) == 0) state.emplace_back(name, t);
    }
    trainer.optimizer().load_state(state);
  }

  std::vector<TrainContext<float>> corpus;
  const auto corpus_path = config.get("corpus");
  if (!corpus_path.empty()) {
    for (const auto& sample : load_corpus(corpus_path, model_cfg.llm.vocab())) {
      TrainContext<float> ctx;
      ctx.seq = build(sample.elements, model_cfg.visual_tokens, model_cfg.llm.vocab());
      for (const auto& p : sample.image_paths) {
        auto image = to_diffusion<float>(read_pnm(p));
        if (image.dim(0) != model_cfg.decoder.image_size || image.dim(1) != model_cfg.decoder.image_size ||
            image.dim(2) != model_cfg.decoder.image_channels) {
          throw DimensionError("corpus image '" + p + "' has shape " + to_string(image.shape()));
        }
        ctx.images.push_back(std::move(image));
      }
      corpus.push_back(std::move(ctx));
    }
  } else {
    corpus = tasks::corpus_for<float>(task, model_cfg, config.get_int("samples"), seed);
  }

  const fs::path out = flags.out_dir.empty() ? fs::path(config.get("out_dir")) : fs::path(flags.out_dir);
  fs::create_directories(out);
  const auto log_path = out / "log.jsonl";
  std::ofstream log(log_path, flags.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot write '" + log_path.string() + "'");
  const auto every = std::max<std::int64_t>(1, config.get_int("log_every"));
  const auto total = config.get_int("steps");
  const auto remaining = std::max<std::int64_t>(0, total - trainer.optimizer().steps());
  const auto lines = tasks::train_corpus(trainer, corpus, remaining, config.get_int("batch_size"),
                                         model_cfg.llm.max_context, seed, [&](const tasks::LogLine& l) {
                                           log << json{{"step", l.step}, {"ntp", l.ntp}, {"nip", l.nip},
                                                       {"total", l.total}, {"wall_ms", l.wall_ms}}
                                                      .dump()
                                               << "\n";
                                           if (l.step % every == 0 || l.step == total) {
                                             std::cerr << "step " << l.step << "  ntp " << l.ntp << "  nip "
                                                       << l.nip << "  total " << l.total << "\n";
                                           }
                                         });
  auto tensors = export_params(model.params());
  for (auto& entry : trainer.optimizer().state()) tensors.push_back(std::move(entry));
  const auto ckpt_path = out / "model.mmi";
  write_checkpoint(ckpt_path.string(), make_checkpoint(config, std::move(tensors)));
  json summary{{"task", task}, {"steps", trainer.optimizer().steps()}, {"checkpoint", ckpt_path.string()},
               {"log", log_path.string()}};
  if (!lines.empty()) summary["final"] = {{"ntp", lines.back().ntp}, {"nip", lines.back().nip}, {"total", lines.back().total}};
  std::cout << summary.dump() << "\n";
  return kOk;
}

int train_images(const RunConfig& config, const TrainFlags& flags, const std::string& task) {
  if (!flags.resume.empty()) throw ConfigError("--resume is supported for the lm and story tasks only");
  const fs::path out = flags.out_dir.empty() ? fs::path(config.get("out_dir")) : fs::path(flags.out_dir);
  fs::create_directories(out);
  const auto log_path = out / "log.jsonl";
  std::ofstream log(log_path);
  if (!log) throw IoError("cannot write '" + log_path.string() + "'");
  const auto every = std::max<std::int64_t>(1, config.get_int("log_every"));
  auto sink = [&](const tasks::LogLine& l) {
    log << json{{"step", l.step}, {"ntp", l.ntp}, {"nip", l.nip}, {"total", l.total}, {"wall_ms", l.wall_ms}}.dump()
        << "\n";
    if (l.step % every == 0) std::cerr << "step " << l.step << "  nip " << l.nip << "\n";
  };
  json summary{{"task", task}, {"log", log_path.string()}};
  std::vector<std::pair<std::string, Tensor<float>>> params;
  if (task == "copy") {
    tasks::CopyConfig cc;
    cc.steps = config.get_int("steps");
    cc.batch = config.get_int("batch_size");
    cc.lr = config.get_float("decoder_lr");
    cc.seed = static_cast<std::uint64_t>(config.get_int("seed"));
    cc.mmfs = !flags.no_mmfs_decoder && config.get_bool("dec_mmfs");
    if (config.get_int("sample_steps") > 0) cc.sample_steps = config.get_int("sample_steps");
    auto r = tasks::run_copy(cc, sink);
    summary["steps"] = cc.steps;
    summary["mmfs"] = cc.mmfs;
    summary["mse"] = r.mse;
    params = std::move(r.params);
  } else {
    tasks::BlobConfig bc;
    bc.steps = config.get_int("steps");
    bc.seed = static_cast<std::uint64_t>(config.get_int("seed"));
    auto r = tasks::run_blob(bc, 32, sink);
    summary["steps"] = bc.steps;
    summary["window_means"] = r.window_means;
    summary["data_moments"] = {r.data_mean, r.data_std};
    summary["sample_moments"] = {r.sample_mean, r.sample_std};
    params = std::move(r.params);
  }
  const auto ckpt_path = out / "model.mmi";
  write_checkpoint(ckpt_path.string(), make_checkpoint(config, std::move(params)));
  summary["checkpoint"] = ckpt_path.string();
  std::cout << summary.dump() << "\n";
  return kOk;
}

int cmd_train(const Common& common, const TrainFlags& flags, const std::string& task_flag) {
  RunConfig base;
  if (!flags.resume.empty()) {
    for (const auto& [k, v] : read_checkpoint(flags.resume).config) base.set(k, v);
  }
  auto config = load_config(common, base);
  if (!task_flag.empty()) config.set("task", task_flag);
  if (flags.no_mmfs_decoder) config.set("dec_mmfs", "false");
  const auto task = config.get("task");
  if (task == "lm" || task == "story") return train_sequences(config, flags, task);
  return train_images(config, flags, task);
}

// ---------------------------------------------------------------- generate

std::vector<std::int64_t> parse_ids(const std::string& text) {
  std::vector<std::int64_t> ids;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    try {
      std::size_t used = 0;
      ids.push_back(std::stoll(word, &used));
      if (used != word.size()) throw std::invalid_argument(word);
    } catch (const std::exception&) {
      throw ConfigError("prompt token '" + word + "' is not an integer id");
    }
  }
  return ids;
}

int cmd_generate(const Common& common, const std::string& checkpoint, const std::vector<std::string>& prompt_parts,
                 const std::string& out_dir, bool trace) {
  const auto ckpt = read_checkpoint(checkpoint);
  RunConfig base;
  for (const auto& [k, v] : ckpt.config) base.set(k, v);
  const auto config = load_config(common, base);
  const auto model_cfg = config.model();
  Model<float> model(model_cfg, static_cast<std::uint64_t>(config.get_int("seed")));
  load_params(ckpt, model.params());

  // Prompt parts: "text:1 2 3" or "image:path.ppm"; default is one text token.
  std::vector<Element> prompt;
  std::vector<Tensor<float>> images;
  json prompt_json = json::array();
  for (const auto& part : prompt_parts) {
    if (part.rfind("image:", 0) == 0) {
      const auto path = part.substr(6);
      images.push_back(to_diffusion<float>(read_pnm(path)));
      prompt.push_back(Element::img(static_cast<std::int64_t>(images.size()) - 1));
      prompt_json.push_back({{"image", path}});
    } else {
      const auto ids = parse_ids(part.rfind("text:", 0) == 0 ? part.substr(5) : part);
      for (auto id : ids) {
        if (id < 0 || id >= model_cfg.llm.text_vocab) throw ConfigError("prompt token " + std::to_string(id) + " out of range");
      }
      prompt.push_back(Element::text(ids));
      prompt_json.push_back({{"text", ids}});
    }
  }
  if (prompt.empty()) {
    prompt.push_back(Element::text({1}));
    prompt_json.push_back({{"text", {1}}});
  }

  auto gen = config.generation();
  std::ostringstream trace_csv;
  trace_csv << "image,step,mean,std\n";
  if (trace) {
    gen.sample_trace = [&](std::int64_t image, std::int64_t step, double mean, double sd) {
      trace_csv << image << ',' << step << ',' << mean << ',' << sd << '\n';
    };
  }
  const auto result = generate(model, prompt, images, gen);
  const fs::path out = out_dir.empty() ? fs::path(config.get("out_dir")) : fs::path(out_dir);
  fs::create_directories(out);
  if (trace) write_text(out / "trace.csv", trace_csv.str());
  json elements = json::array();
  for (const auto& e : result.elements) {
    if (e.kind == Element::Kind::Text) {
      elements.push_back({{"text", e.tokens}});
    } else {
      const auto k = static_cast<std::size_t>(e.image) - images.size();
      const auto name = "image_" + std::to_string(k) + ".ppm";
      write_pnm((out / name).string(), from_diffusion(result.images[k]));
      elements.push_back({{"image", name}});
    }
  }
  json doc{{"checkpoint", checkpoint},
           {"seed", config.get_int("seed")},
           {"temperature", gen.temperature},
           {"guidance", gen.guidance},
           {"prompt", prompt_json},
           {"elements", elements}};
  write_text(out / "generation.json", doc.dump(2) + "\n");
  std::cout << doc.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- bench

int cmd_bench(const std::string& out_dir, bool runtime, int reps, std::uint64_t seed) {
  const fs::path out = out_dir;
  const auto rows = bench::sweep(bench::figure_grid());
  write_text(out / "flops.csv", bench::sweep_csv(rows));
  std::vector<std::string> charts;
  for (std::int64_t nt : {32, 128, 256}) {
    std::vector<bench::Series> series;
    for (const std::string variant : {"nv32", "nv256", "mmfs32", "dense32"}) {
      bench::Series s{variant, {}};
      for (const auto& r : rows) {
        if (r.scenario.variant == variant && r.scenario.text_tokens == nt) {
          s.points.emplace_back(static_cast<double>(r.scenario.images), r.flops.total() / 1e12);
        }
      }
      series.push_back(std::move(s));
    }
    const auto name = "flops_nt" + std::to_string(nt) + ".svg";
    write_text(out / name, bench::line_chart("LLM TFLOPs, " + std::to_string(nt) + " text tokens per image",
                                             "images", "TFLOPs", series));
    charts.push_back(name);
  }
  const auto dense = bench::count_flops(bench::scale_preset(256, false));
  const auto sparse = bench::count_flops(bench::scale_preset(32, true));
  const auto base = bench::count_flops(bench::scale_preset(32, false));
  json summary{{"flops_csv", (out / "flops.csv").string()},
               {"charts", charts},
               {"rows", rows.size()},
               {"preset_ratio", dense.llm() / (sparse.llm() + sparse.mmfs)},
               {"preset_mmfs_overhead", sparse.mmfs / base.llm()}};
  if (runtime) {
    bench::RuntimeScenario mmfs32{"mmfs32"}, nv256{"nv256"};
    nv256.visual_tokens = 256;
    nv256.mmfs = false;
    bench::RuntimeScenario nv32{"nv32"};
    nv32.mmfs = false;
    const auto measured = bench::measure({nv32, mmfs32, nv256}, reps, 1, seed);
    write_text(out / "runtime.csv", bench::runtime_csv(measured));
    summary["runtime_csv"] = (out / "runtime.csv").string();
  }
  std::cout << summary.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- ablate

int cmd_ablate(const std::string& out_dir, int seeds, std::int64_t steps, std::uint64_t seed) {
  const fs::path out = out_dir;
  std::ostringstream csv;
  csv << "seed,arm,steps,final_loss,mse\n";
  json table = json::array();
  bool all = true;
  for (int s = 0; s < seeds; ++s) {
    tasks::CopyConfig cc;
    cc.seed = seed * 3 + static_cast<std::uint64_t>(s);
    if (steps > 0) cc.steps = steps;
    double mse[2] = {0, 0};
    for (int arm = 0; arm < 2; ++arm) {
      cc.mmfs = arm == 0;
      const auto start = std::chrono::steady_clock::now();
      const auto r = tasks::run_copy(cc);
      mse[arm] = r.mse;
      const char* name = cc.mmfs ? "with_mmfs" : "without_mmfs";
      csv << cc.seed << ',' << name << ',' << cc.steps << ',' << r.losses.back() << ',' << r.mse << '\n';
      std::cerr << "seed " << cc.seed << "  " << name << "  mse " << r.mse << "  (" << ms_since(start) / 1000 << " s)\n";
    }
    const double ratio = mse[0] / mse[1];
    all = all && ratio <= 0.5;
    table.push_back({{"seed", cc.seed}, {"with_mmfs", mse[0]}, {"without_mmfs", mse[1]}, {"ratio", ratio}});
  }
  write_text(out / "ablation.csv", csv.str());
  json summary{{"task", "copy"}, {"table", table}, {"criterion", "ratio <= 0.5 for every seed"}, {"passed", all},
               {"csv", (out / "ablation.csv").string()}};
  std::cout << summary.dump(2) << "\n";
  return all ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interleaved image-text toy model: self-tests, training, generation, benchmarks."};
  app.require_subcommand(1);
  app.set_version_flag("--version", "mmi 0.1.0");

  Common selftest_c, train_c, gen_c;
  std::vector<std::string> filters;
  bool full = false;
  auto* selftest = app.add_subcommand("selftest", "Run the invariant suite; JSON summary on stdout");
  add_common(selftest, selftest_c);
  selftest->add_option("--filter", filters, "module or check id to run (repeatable)");
  selftest->add_flag("--full", full, "use the full trial counts of the acceptance suite");

  TrainFlags train_flags;
  std::string task;
  auto* train = app.add_subcommand("train", "Train on a synthetic task; writes log.jsonl and model.mmi");
  add_common(train, train_c);
  train->add_option("--task", task, "lm, story, copy or blob (default: config key 'task')")
      ->check(CLI::IsMember({"lm", "story", "copy", "blob"}));
  train->add_option("-o,--out", train_flags.out_dir, "output directory (default: config key 'out_dir')");
  train->add_option("--resume", train_flags.resume, "continue from a checkpoint until 'steps' total steps");
  train->add_flag("--no-mmfs-decoder", train_flags.no_mmfs_decoder, "train the decoder without MMFS");

  std::string checkpoint, gen_out;
  bool trace = false;
  std::vector<std::string> prompt;
  auto* gen = app.add_subcommand("generate", "Generate interleaved text and images from a checkpoint");
  add_common(gen, gen_c);
  gen->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  gen->add_option("--prompt", prompt, "prompt part: 'text:1 2 3' or 'image:file.ppm' (repeatable, in order)");
  gen->add_option("-o,--out", gen_out, "output directory (default: config key 'out_dir')");
  gen->add_flag("--trace", trace, "write trace.csv: per-step mean and std of each sampled image");

  std::string bench_out = "bench";
  bool runtime = false;
  int reps = 5;
  std::uint64_t bench_seed = 0;
  auto* bench_cmd = app.add_subcommand("bench", "FLOPs sweep CSV and SVG charts; optional runtime CSV");
  bench_cmd->add_option("-o,--out", bench_out, "output directory");
  bench_cmd->add_flag("--runtime", runtime, "also time the toy-scale scenarios");
  bench_cmd->add_option("--reps", reps, "timed repetitions per scenario")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--seed", bench_seed, "random seed");

  std::string ablate_out = "ablate";
  int seeds = 3;
  std::int64_t ablate_steps = 0;
  std::uint64_t ablate_seed = 0;
  std::string ablate_task = "copy";
  auto* ablate = app.add_subcommand("ablate", "Paired with/without-MMFS decoder runs on the layout-copy task");
  ablate->add_option("--task", ablate_task, "ablation task")->check(CLI::IsMember({"copy"}));
  ablate->add_option("-o,--out", ablate_out, "output directory");
  ablate->add_option("--seeds", seeds, "number of seeds")->check(CLI::PositiveNumber);
  ablate->add_option("--steps", ablate_steps, "training steps per arm (default 1000)");
  ablate->add_option("--seed", ablate_seed, "first seed block");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*selftest) return cmd_selftest(selftest_c, filters, full);
    if (*train) return cmd_train(train_c, train_flags, task);
    if (*gen) return cmd_generate(gen_c, checkpoint, prompt, gen_out, trace);
    if (*bench_cmd) return cmd_bench(bench_out, runtime, reps, bench_seed);
    if (*ablate) return cmd_ablate(ablate_out, seeds, ablate_steps, ablate_seed);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
