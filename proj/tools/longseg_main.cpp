#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "longseg/config.hpp"
#include "longseg/cross.hpp"
#include "longseg/longitudinal.hpp"
#include "longseg/metrics.hpp"
#include "longseg/phantom.hpp"

namespace {

using namespace longseg;

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

struct CommonArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 1;
  bool threads_given = false;
};

std::array<int, 3> parse_order(const Config& cfg, const std::string& key,
                               const std::array<int, 3>& fallback) {
  if (!cfg.has(key)) return fallback;
  std::vector<double> v = cfg.get_doubles(key);
  if (v.size() == 1) v = {v[0], v[0], v[0]};
  if (v.size() != 3) throw format_error("config: " + key + " needs 1 or 3 values");
  std::array<int, 3> order{};
  for (int a = 0; a < 3; ++a) {
    const int i = static_cast<int>(std::lround(v[static_cast<std::size_t>(a)]));
    if (static_cast<double>(i) != v[static_cast<std::size_t>(a)] || i < 0) {
      throw format_error("config: " + key + " entries must be non-negative integers");
    }
    order[static_cast<std::size_t>(a)] = i;
  }
  return order;
}

FitConfig fit_config_from(const Config& cfg, const CommonArgs& args) {
  FitConfig fc;
  fc.kappa = cfg.get_double("kappa", fc.kappa);
  fc.max_outer_sweeps = static_cast<int>(cfg.get_int("max_outer_sweeps", fc.max_outer_sweeps));
  fc.em_tolerance = cfg.get_double("em_tolerance", fc.em_tolerance);
  fc.bias_order = parse_order(cfg, "bias_order", fc.bias_order);
  fc.mesh_lbfgs.max_iters =
      static_cast<int>(cfg.get_int("mesh_iterations", fc.mesh_lbfgs.max_iters));
  fc.seed = args.seed_given ? args.seed : static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  fc.threads = args.threads_given ? args.threads : static_cast<int>(cfg.get_int("threads", 1));
  fc.validate();
  return fc;
}

LongConfig long_config_from(const Config& cfg, const CommonArgs& args, bool degenerate) {
  LongConfig lc;
  lc.cross = fit_config_from(cfg, args);
  lc.kappa0_ratio = cfg.get_double("kappa0_ratio", lc.kappa0_ratio);
  lc.p0_ratio = cfg.get_double("p0_ratio", lc.p0_ratio);
  lc.outer_iterations = static_cast<int>(cfg.get_int("outer_iterations", lc.outer_iterations));
  lc.inner_sweeps = static_cast<int>(cfg.get_int("inner_sweeps", lc.inner_sweeps));
  lc.lesion.enabled = cfg.get_bool("lesion", false);
  if (lc.lesion.enabled) {
    lc.lesion.atlas_class = static_cast<int>(cfg.get_int("lesion_atlas_class", 0));
    lc.lesion.uniform_prior = cfg.get_double("lesion_prior", lc.lesion.uniform_prior);
    lc.lesion.threshold = cfg.get_double("lesion_threshold", lc.lesion.threshold);
    lc.lesion.wm_class = static_cast<int>(cfg.get_int("lesion_wm_class", lc.lesion.wm_class));
    if (cfg.has("lesion_offset")) {
      const std::vector<double> offset = cfg.get_doubles("lesion_offset");
      lc.lesion.intensity_offset = Eigen::Map<const Eigen::VectorXd>(
          offset.data(), static_cast<Eigen::Index>(offset.size()));
    }
  }
  if (degenerate) {
    lc.p0_ratio = 0.0;
    lc.kappa0_ratio = 1e6;
  }
  lc.validate();
  return lc;
}

void write_trace_csv(const std::vector<double>& trace, const std::string& path) {
  std::ofstream out(path);
  out.precision(17);
  out << "step,objective\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out << i << "," << trace[i] << "\n";
  if (!out) throw format_error("cannot write " + path);
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n == 0) throw validation_error("median of an empty set");
  return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- fit ---------------------------------------------------------------------

int cmd_fit(const CommonArgs& args) {
  const Config cfg = Config::parse_file(args.config_path);
  MultiContrastVolume vol = read_volume(cfg.get_string("volume"));
  vol.validate();
  const TetrahedralMesh mesh = read_atlas(cfg.get_string("atlas"));
  const FitConfig fc = fit_config_from(cfg, args);

  const MultiContrastVolume logvol = ensure_log_transformed(vol);
  const CrossFitResult fit = fit_cross(logvol, mesh, fc);
  const LabelVolume seg = segment(logvol, mesh, fit.x_hat, fit.gauss, fit.bias, fc.threads);

  std::filesystem::create_directories(args.out_dir);
  write_params(fit.gauss, fit.bias, args.out_dir + "/params.params");
  write_positions(fit.x_hat, args.out_dir + "/positions.pos");
  write_label_volume(seg, args.out_dir + "/labels.mgv");
  write_trace_csv(fit.objective_trace, args.out_dir + "/trace.csv");
  if (fit.mesh_warning) {
    std::cerr << "warning: a mesh line search stopped early\n";
  }
  return kExitOk;
}

// ---- fit-long ------------------------------------------------------------------

int cmd_fit_long(const CommonArgs& args, bool degenerate) {
  const Config cfg = Config::parse_file(args.config_path);
  const std::vector<std::string> paths = cfg.get_all("volume");
  if (paths.empty()) throw format_error("config: need at least one volume");
  std::vector<MultiContrastVolume> volumes;
  for (const std::string& p : paths) {
    volumes.push_back(read_volume(p));
    volumes.back().validate();
    if (volumes.back().grid.dims != volumes.front().grid.dims) {
      throw format_error("config: volume grids disagree: " + p);
    }
  }
  const TetrahedralMesh mesh = read_atlas(cfg.get_string("atlas"));
  const LongConfig lc = long_config_from(cfg, args, degenerate);

  std::vector<double> times(paths.size());
  for (std::size_t t = 0; t < times.size(); ++t) times[t] = static_cast<double>(t);
  if (cfg.has("times")) {
    const std::vector<double> given = cfg.get_doubles("times");
    if (given.size() != paths.size()) {
      throw format_error("config: times must list one offset per volume");
    }
    times = given;
  }

  const LongFitResult result = fit_longitudinal(volumes, mesh, lc);

  std::filesystem::create_directories(args.out_dir);
  VolumeTimeSeries fitted;
  fitted.subject_id = cfg.get_string("subject", "subject");
  for (std::size_t t = 0; t < result.timepoints.size(); ++t) {
    const TimepointResult& tp = result.timepoints[t];
    const std::string stem = args.out_dir + "/tp" + std::to_string(t);
    write_params(tp.state.gauss, tp.state.bias, stem + ".params");
    write_positions(tp.state.x, stem + ".pos");
    write_label_volume(tp.seg, stem + "_labels.mgv");
    if (!tp.lesion_mask.empty()) {
      write_mask_volume(tp.seg.grid, tp.lesion_mask, stem + "_lesion.mgv");
    }
    VolumeTimeSeries::Entry entry;
    entry.time_years = times[t];
    entry.volumes_mm3 = structure_volumes(tp.seg);
    fitted.entries.push_back(std::move(entry));
  }
  write_positions(result.latents.x0, args.out_dir + "/latents.pos");
  {
    GaussianParams proto;
    proto.means = result.latents.mu0;
    proto.covariances = result.latents.sigma0;
    BiasField zero_bias;
    zero_bias.order = lc.cross.bias_order;
    zero_bias.coefficients =
        Eigen::MatrixXd::Zero(proto.n_contrasts(), zero_bias.n_basis());
    write_params(proto, zero_bias, args.out_dir + "/latents.params");
  }
  {
    std::ofstream out(args.out_dir + "/hyper.csv");
    out.precision(17);
    out << "class,p0,n_k\n";
    for (Eigen::Index k = 0; k < result.hyper.p0.size(); ++k) {
      out << (k + 1) << "," << result.hyper.p0[k] << "," << result.hyper.n_k[k] << "\n";
    }
    if (!out) throw format_error("cannot write hyper.csv");
  }
  write_label_volume(result.template_seg, args.out_dir + "/template_labels.mgv");
  write_volume_table({fitted}, args.out_dir + "/volumes.csv");
  write_trace_csv(result.objective_trace, args.out_dir + "/trace.csv");
  if (result.mesh_warning) {
    std::cerr << "warning: a mesh line search stopped early\n";
  }
  return kExitOk;
}

// ---- metrics -------------------------------------------------------------------

std::vector<std::string> structure_names(const VolumeTimeSeries& series) {
  std::vector<std::string> names;
  for (const auto& [name, v] : series.entries.front().volumes_mm3) names.push_back(name);
  return names;
}

bool in_group(const std::string& subject, const std::string& prefix) {
  return subject == prefix || subject.rfind(prefix + "_", 0) == 0;
}

void lda_features_from_csv(const std::string& path, std::vector<Eigen::VectorXd>& features,
                           std::vector<int>& labels) {
  std::ifstream in(path);
  if (!in) throw format_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw format_error(path + ": empty feature table");
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw format_error(path + ": bad number '" + cell + "'");
      }
    }
    if (row.size() < 2) throw format_error(path + ": rows need a label and features");
    labels.push_back(static_cast<int>(std::lround(row[0])));
    features.emplace_back(
        Eigen::Map<const Eigen::VectorXd>(row.data() + 1,
                                          static_cast<Eigen::Index>(row.size() - 1)));
  }
  if (features.empty()) throw format_error(path + ": empty feature table");
}

int cmd_metrics(const CommonArgs& args) {
  const Config cfg = Config::parse_file(args.config_path);
  std::filesystem::create_directories(args.out_dir);
  std::vector<MetricRecord> rows;
  bool ran_anything = false;

  std::vector<VolumeTimeSeries> table;
  if (cfg.has("table")) {
    ran_anything = true;
    table = read_volume_table(cfg.get_string("table"));
    if (table.empty()) throw format_error("metrics: volume table is empty");
    for (const VolumeTimeSeries& series : table) {
      series.validate();
      for (const std::string& name : structure_names(series)) {
        if (series.entries.size() >= 2) {
          rows.push_back({"apc", series.subject_id, name, apc(series, name)});
        }
        std::vector<double> volumes;
        for (const auto& e : series.entries) volumes.push_back(e.volumes_mm3.at(name));
        for (const PairChange& pc : pairwise_changes(volumes)) {
          const std::string suffix =
              "_" + std::to_string(pc.first) + "_" + std::to_string(pc.second);
          rows.push_back({"aspc" + suffix, series.subject_id, name, pc.aspc});
          rows.push_back({"spc" + suffix, series.subject_id, name, pc.spc});
        }
      }
    }
  }

  if (cfg.has("group_a") || cfg.has("group_b")) {
    ran_anything = true;
    if (table.empty()) throw format_error("metrics: group comparison needs a table");
    const std::string prefix_a = cfg.get_string("group_a");
    const std::string prefix_b = cfg.get_string("group_b");
    const std::string structure = cfg.get_string("structure");
    GroupSample a{prefix_a, {}};
    GroupSample b{prefix_b, {}};
    for (const VolumeTimeSeries& series : table) {
      if (series.entries.size() < 2) continue;
      const double value = apc(series, structure);
      if (in_group(series.subject_id, prefix_a)) a.values.push_back(value);
      if (in_group(series.subject_id, prefix_b)) b.values.push_back(value);
    }
    const std::string pair = prefix_a + "-vs-" + prefix_b;
    rows.push_back({"cohens_d", pair, structure, cohens_d(a, b)});
    rows.push_back({"sample_size", pair, structure,
                    static_cast<double>(required_sample_size(a, b))});
  }

  if (cfg.has("lesion_mask")) {
    ran_anything = true;
    const std::vector<std::string> paths = cfg.get_all("lesion_mask");
    const std::vector<double> times = cfg.get_doubles("times");
    const MultiContrastVolume first = read_volume(paths.front());
    std::vector<std::vector<std::uint8_t>> masks;
    for (const std::string& p : paths) masks.push_back(read_mask_volume(p, first.grid));
    const auto [appear, vanish] = lesion_rates(masks, times);
    const std::string subject = cfg.get_string("subject", "subject");
    rows.push_back({"les_appear", subject, "lesion", appear});
    rows.push_back({"les_vanish", subject, "lesion", vanish});
  }

  if (cfg.has("dice_a") || cfg.has("dice_b")) {
    ran_anything = true;
    const MultiContrastVolume first = read_volume(cfg.get_string("dice_a"));
    const auto mask_a = read_mask_volume(cfg.get_string("dice_a"), first.grid);
    const auto mask_b = read_mask_volume(cfg.get_string("dice_b"), first.grid);
    rows.push_back({"dice", cfg.get_string("subject", "subject"), "lesion",
                    dice(mask_a, mask_b)});
  }

  if (cfg.has("lda_features")) {
    ran_anything = true;
    std::vector<Eigen::VectorXd> features;
    std::vector<int> labels;
    lda_features_from_csv(cfg.get_string("lda_features"), features, labels);
    const int folds = static_cast<int>(cfg.get_int("folds", 5));
    const std::uint64_t seed =
        args.seed_given ? args.seed : static_cast<std::uint64_t>(cfg.get_int("seed", 0));
    const LdaRocResult roc = lda_roc(features, labels, folds, seed);
    rows.push_back({"auc", "cohort", "lda", roc.auc});
    write_roc_csv(roc.curve, args.out_dir + "/roc.csv");
  }

  if (!ran_anything) {
    throw format_error("metrics: config selects nothing to compute");
  }
  write_metric_csv(rows, args.out_dir + "/metrics.csv");
  return kExitOk;
}

// ---- grid-search ---------------------------------------------------------------

int cmd_grid_search(const CommonArgs& args) {
  const Config cfg = Config::parse_file(args.config_path);
  PhantomSpec base = PhantomSpec::from_config(cfg);
  if (args.seed_given) base.seed = args.seed;

  const std::string grid_structure = cfg.get_string("grid_structure");
  const auto target = std::find_if(base.structures.begin(), base.structures.end(),
                                   [&](const auto& s) { return s.name == grid_structure; });
  if (target == base.structures.end()) {
    throw format_error("grid-search: grid_structure '" + grid_structure +
                       "' matches no structure");
  }
  const int target_label = target->label;

  CohortGroup stable;
  stable.name = "stable";
  stable.n_subjects = static_cast<int>(cfg.get_int("subjects_per_group", 3));
  stable.base = base;
  std::find_if(stable.base.structures.begin(), stable.base.structures.end(),
               [&](const auto& s) { return s.name == grid_structure; })
      ->rate = cfg.get_double("group_a_rate", 0.0);
  stable.rate_spread = cfg.get_double("rate_spread", 0.25);

  CohortGroup decline = stable;
  decline.name = "decline";
  std::find_if(decline.base.structures.begin(), decline.base.structures.end(),
               [&](const auto& s) { return s.name == grid_structure; })
      ->rate = cfg.get_double("group_b_rate", -2.0);

  const std::vector<CohortSubject> cohort = generate_cohort({stable, decline}, base.seed);

  const int spacing = static_cast<int>(cfg.get_int("atlas_spacing", 6));
  std::vector<TetrahedralMesh> atlases;
  for (const CohortSubject& subject : cohort) {
    atlases.push_back(build_atlas_from_labels(subject.output.labels[0], spacing));
  }

  const LongConfig base_lc = long_config_from(cfg, args, false);
  const std::string structure_key = "class" + std::to_string(target_label);

  const std::array<double, 5> kappa0_ratios{5.0, 10.0, 14.0, 15.0, 20.0};
  const std::array<double, 5> p0_ratios{0.25, 0.5, 0.75, 1.0, 1.25};

  std::filesystem::create_directories(args.out_dir);
  std::ofstream out(args.out_dir + "/grid.csv");
  out.precision(17);
  out << "kappa0_ratio,p0_ratio,median_aspc,cohens_d,status\n";
  for (const double kr : kappa0_ratios) {
    for (const double pr : p0_ratios) {
      LongConfig lc = base_lc;
      lc.kappa0_ratio = kr;
      lc.p0_ratio = pr;
      try {
        std::vector<double> stable_aspcs;
        GroupSample apc_a{"stable", {}};
        GroupSample apc_b{"decline", {}};
        for (std::size_t s = 0; s < cohort.size(); ++s) {
          const CohortSubject& subject = cohort[s];
          const LongFitResult fit =
              fit_longitudinal(subject.output.volumes, atlases[s], lc);
          VolumeTimeSeries fitted;
          fitted.subject_id = subject.id;
          for (std::size_t t = 0; t < fit.timepoints.size(); ++t) {
            VolumeTimeSeries::Entry entry;
            entry.time_years = subject.output.ground_truth.entries[t].time_years;
            entry.volumes_mm3 = structure_volumes(fit.timepoints[t].seg);
            fitted.entries.push_back(std::move(entry));
          }
          const double fitted_apc = apc(fitted, structure_key);
          if (subject.group == "stable") {
            apc_a.values.push_back(fitted_apc);
            std::vector<double> volumes;
            for (const auto& e : fitted.entries) {
              volumes.push_back(e.volumes_mm3.at(structure_key));
            }
            for (const PairChange& pc : pairwise_changes(volumes)) {
              stable_aspcs.push_back(pc.aspc);
            }
          } else {
            apc_b.values.push_back(fitted_apc);
          }
        }
        std::ostringstream row;
        row.precision(17);
        row << kr << "," << pr << "," << median_of(stable_aspcs) << ","
            << cohens_d(apc_a, apc_b) << ",ok\n";
        out << row.str();
      } catch (const std::exception& e) {
        std::cerr << "grid cell kappa0_ratio=" << kr << " p0_ratio=" << pr
                  << " failed: " << e.what() << "\n";
        out << kr << "," << pr << ",nan,nan,failed\n";
      }
      out.flush();
    }
  }
  if (!out) throw format_error("cannot write grid.csv");
  return kExitOk;
}

// ---- phantom -------------------------------------------------------------------

int cmd_phantom(const CommonArgs& args, int cohort_n) {
  const Config cfg = Config::parse_file(args.config_path);
  PhantomSpec spec = PhantomSpec::from_config(cfg);
  if (args.seed_given) spec.seed = args.seed;
  if (cohort_n > 0) {
    CohortGroup group;
    group.name = cfg.get_string("cohort_name", "subj");
    group.n_subjects = cohort_n;
    group.base = spec;
    group.rate_spread = cfg.get_double("rate_spread", 0.0);
    for (const CohortSubject& subject : generate_cohort({group}, spec.seed)) {
      write_phantom(subject.output, args.out_dir + "/" + subject.id);
    }
  } else {
    write_phantom(generate(spec), args.out_dir);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Longitudinal whole-brain and lesion segmentation"};
  app.require_subcommand(1);

  CommonArgs args;
  bool degenerate = false;
  int cohort_n = 0;

  auto add_common = [&](CLI::App* sub, bool with_threads = true) {
    sub->add_option("--config", args.config_path, "key = value configuration file")
        ->required();
    sub->add_option("--out-dir", args.out_dir, "output directory");
    sub->add_option("--seed", args.seed, "seed override")
        ->each([&](const std::string&) { args.seed_given = true; });
    if (with_threads) {
      sub->add_option("--threads", args.threads, "thread cap")
          ->each([&](const std::string&) { args.threads_given = true; });
    }
  };

  CLI::App* fit = app.add_subcommand("fit", "cross-sectional fit of one volume");
  add_common(fit);
  CLI::App* fit_long = app.add_subcommand("fit-long", "longitudinal fit of a subject");
  add_common(fit_long);
  fit_long->add_flag("--degenerate", degenerate,
                     "decouple time points (p0 = 0, very stiff subject atlas)");
  CLI::App* metrics = app.add_subcommand("metrics", "evaluation metrics over tables and masks");
  add_common(metrics, false);
  CLI::App* grid = app.add_subcommand("grid-search", "hyperparameter grid over a phantom cohort");
  add_common(grid);
  CLI::App* phantom = app.add_subcommand("phantom", "synthetic subject generation");
  add_common(phantom, false);
  phantom->add_option("--cohort", cohort_n, "generate this many subjects");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (app.got_subcommand(fit)) return cmd_fit(args);
    if (app.got_subcommand(fit_long)) return cmd_fit_long(args, degenerate);
    if (app.got_subcommand(metrics)) return cmd_metrics(args);
    if (app.got_subcommand(grid)) return cmd_grid_search(args);
    if (app.got_subcommand(phantom)) return cmd_phantom(args, cohort_n);
  } catch (const numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const longseg::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitInput;
}
