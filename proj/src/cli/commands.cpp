#include "vqd/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "vqd/diagnostics.hpp"
#include "vqd/grad_suite.hpp"
#include "vqd/run_config.hpp"

namespace vqd::cli {

namespace {

std::string fixed(double v, int digits = 6) {
  if (std::isnan(v)) return "nan";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

RunConfig config_or_default(const std::optional<std::filesystem::path>& path) {
  if (path) return load_run_config(*path);
  RunConfig cfg;
  cfg.finalize();
  return cfg;
}

void check_scenes(const std::vector<scenes::Scene>& data, const RunConfig& cfg,
                  const std::filesystem::path& path) {
  for (const auto& s : data)
    if (s.grid != cfg.scene.grid || s.channels != cfg.detector.input_channels)
      throw scenes::DatasetError(path.string() + ": scene " + std::to_string(s.scene_id) +
                                 " has a " + std::to_string(s.grid) + "x" +
                                 std::to_string(s.grid) + "x" + std::to_string(s.channels) +
                                 " grid, configuration expects " +
                                 std::to_string(cfg.scene.grid) + "x" +
                                 std::to_string(cfg.scene.grid) + "x" +
                                 std::to_string(cfg.detector.input_channels));
}

// Runs `body`, mapping exceptions onto exit codes.
template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const scenes::DatasetError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kDataError;
  } catch (const train::NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumericError;
  } catch (const diagnostics::ValidationError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
}

}  // namespace

std::uint64_t split_seed(std::uint64_t seed, const std::string& split) {
  if (split == "train") return seed * 2;
  if (split == "val") return seed * 2 + 1;
  throw std::invalid_argument("split must be train or val, got '" + split + "'");
}

int cmd_gen_data(const GenDataArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = config_or_default(args.config);
    const std::uint64_t seed = split_seed(args.seed, args.split);
    if (std::filesystem::exists(args.out) && !args.force) {
      err << "refusing to overwrite " << args.out.string() << " (use --force)\n";
      return static_cast<int>(kUsageError);
    }
    const auto data = scenes::generate_dataset(args.scenes, seed, cfg.scene);
    scenes::save_dataset(data, args.out);
    out << "wrote " << data.size() << " scenes (seed " << args.seed << ", split " << args.split
        << ") to " << args.out.string() << '\n';
    return static_cast<int>(kOk);
  });
}

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = config_or_default(args.config);
    if (args.run.empty() || args.run.find('/') != std::string::npos)
      throw std::invalid_argument("run name must be a non-empty single path component");
    if (args.mode) {
      const auto mode = model::parse_mode(*args.mode);
      if (!mode) throw std::invalid_argument("unknown mode '" + *args.mode + "'");
      model::apply_mode(cfg.detector, *mode);
      cfg.finalize();
    }
    const auto train_set = scenes::load_dataset(args.data);
    const auto val_set = scenes::load_dataset(args.val);
    check_scenes(train_set, cfg, args.data);
    check_scenes(val_set, cfg, args.val);

    const auto dir = cfg.runs_dir / args.run;
    std::filesystem::create_directories(dir);
    {
      std::ofstream cfg_out(dir / "config.txt");
      if (args.mode) cfg_out << "# mode " << *args.mode << '\n';
      cfg_out << format_run_config(cfg);
      if (!cfg_out) throw std::runtime_error("cannot write " + (dir / "config.txt").string());
    }
    auto params = model::create_params(cfg.detector, cfg.train.seed);
    const auto result = train::train(
        *params, cfg.detector, cfg.train, train_set, val_set, dir,
        [&](const diagnostics::EpochRecord& r) {
          out << "epoch " << r.epoch << " loss " << fixed(r.loss_total, 4) << " val_ap40 "
              << fixed(r.val_ap40, 4) << " neg_entropy " << fixed(r.negative_entropy, 4)
              << " mass " << fixed(r.noisy_to_learnable_mass, 4) << '\n';
        });
    out << "best val_ap40 " << fixed(result.best_val_ap) << " at epoch " << result.best_epoch
        << "; run written to " << dir.string() << '\n';
    return static_cast<int>(kOk);
  });
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (!std::filesystem::exists(args.checkpoint))
      throw CheckpointError("missing checkpoint " + args.checkpoint.string());
    if (!(args.iou > 0.0 && args.iou < 1.0))
      throw std::invalid_argument("--iou must lie in (0, 1)");
    std::optional<std::filesystem::path> config = args.config;
    if (!config) {
      const auto beside = args.checkpoint.parent_path() / "config.txt";
      if (std::filesystem::exists(beside)) config = beside;
    }
    const RunConfig cfg = config_or_default(config);
    const auto data = scenes::load_dataset(args.data);
    check_scenes(data, cfg, args.data);
    auto params = model::create_params(cfg.detector, 0);
    load_checkpoint(params->store, args.checkpoint);
    const auto ev = train::evaluate(*params, cfg.detector, data, args.iou);
    for (std::size_t c = 0; c < ev.per_class.size(); ++c)
      out << "class " << c << " AP40="
          << (ev.per_class[c] ? fixed(*ev.per_class[c]) : std::string("n/a")) << '\n';
    out << "AP40=" << fixed(ev.ap40.value_or(0.0)) << '\n';
    return static_cast<int>(kOk);
  });
}

int cmd_grad_check(const GradCheckArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    GradSuiteOptions opt;
    opt.seed = args.seed;
    opt.perturb = args.perturb;
    bool ok = true;
    for (const auto& r : run_gradient_suite(opt)) {
      char line[128];
      std::snprintf(line, sizeof line, "%-28s max_rel_error=%.3e tol=%.0e %s\n",
                    r.name.c_str(), r.max_rel_error, r.tolerance, r.passed() ? "ok" : "FAIL");
      out << line;
      ok = ok && r.passed();
    }
    out << (ok ? "all gradient checks passed\n" : "gradient check FAILED\n");
    return static_cast<int>(ok ? kOk : kNumericError);
  });
}

int cmd_diagnose(const DiagnoseArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.runs.empty()) throw std::invalid_argument("--runs needs at least one run name");
    std::vector<std::vector<diagnostics::EpochRecord>> runs;
    std::size_t epochs = 0;
    for (const auto& name : args.runs) {
      runs.push_back(diagnostics::read_run_csv(args.runs_dir / name / "metrics.csv"));
      epochs = std::max(epochs, runs.back().size());
    }
    auto cell = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, " %12s", fixed(v, 4).c_str());
      return std::string(buf);
    };
    out << "epoch";
    for (const auto& name : args.runs) {
      char buf[64];
      std::snprintf(buf, sizeof buf, " %12.12s %12.12s", (name + ":-H").c_str(),
                    (name + ":mass").c_str());
      out << buf;
    }
    out << '\n';
    for (std::size_t e = 0; e < epochs; ++e) {
      const std::string num = std::to_string(e + 1);
      out << std::string(num.size() < 5 ? 5 - num.size() : 0, ' ') << num;
      for (const auto& r : runs) {
        if (e < r.size())
          out << cell(r[e].negative_entropy) << cell(r[e].noisy_to_learnable_mass);
        else
          out << cell(std::nan("")) << cell(std::nan(""));
      }
      out << '\n';
    }
    std::size_t sparsest = 0;
    bool any = false;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      if (runs[i].empty()) continue;
      const auto& last = runs[i].back();
      const auto& first = runs[i].front();
      out << "final " << args.runs[i] << ": -H " << fixed(last.negative_entropy, 4) << " (from "
          << fixed(first.negative_entropy, 4) << "), mass "
          << fixed(last.noisy_to_learnable_mass, 4) << " (from "
          << fixed(first.noisy_to_learnable_mass, 4) << ")\n";
      if (!any || last.negative_entropy > runs[sparsest].back().negative_entropy) sparsest = i;
      any = true;
    }
    if (any) out << "sparser=" << args.runs[sparsest] << '\n';
    return static_cast<int>(kOk);
  });
}

}  // namespace vqd::cli
