// covprop: batch certification, Monte Carlo cross-checks, oracle comparison,
// training, and bookkeeping-cost tables, all backed by the library headers.
// Exit codes: 0 success, 2 I/O failure, 3 validation/format/domain problem,
// 4 numerical failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "covprop/certify.hpp"
#include "covprop/cost.hpp"
#include "covprop/dataset.hpp"
#include "covprop/error.hpp"
#include "covprop/interval.hpp"
#include "covprop/mc.hpp"
#include "covprop/moments.hpp"
#include "covprop/network.hpp"
#include "covprop/parallel.hpp"
#include "covprop/serialize.hpp"
#include "covprop/train.hpp"

namespace {

using namespace covprop;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io:
      return 2;
    case ErrorKind::numeric:
      return 4;
    default:
      return 3;
  }
}

// Streams the CSV to --out when given, stdout otherwise.
void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path);
  if (!out) {
    throw_error(ErrorKind::io, "cannot open '" + out_path + "' for writing");
  }
  out << text;
  if (!out) {
    throw_error(ErrorKind::io, "short write to '" + out_path + "'");
  }
}

constexpr double kThresholds[] = {0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75};

// "0.00: 0.50, 0.25: 0.50, ..." over the fixed radius grid, plus the ACR.
void print_summary(const std::vector<std::pair<CertResult, int>>& results) {
  std::string line;
  char buf[48];
  for (double t : kThresholds) {
    std::snprintf(buf, sizeof buf, "%s%.2f: %.2f", line.empty() ? "" : ", ", t,
                  certified_fraction(results, t));
    line += buf;
  }
  std::printf("certified accuracy by radius threshold:\n%s\n", line.c_str());
  std::printf("ACR: %.12g\n", acr(results));
}

struct CommonFlags {
  std::string model;
  std::string data;
  std::string out;
  double sigma = 0.25;
  double rmax = 0.0;
  std::uint64_t seed = 0;
};

int cmd_certify(const CommonFlags& f) {
  const NetworkSpec net = load_network_file(f.model);
  const Dataset data = load_dataset_file(f.data);
  const BoundConfig cfg{f.rmax, f.sigma};

  std::vector<CertRow> rows(data.size());
  std::vector<std::pair<CertResult, int>> results(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const PropagationResult prop = propagate_all(net, data[i].image, cfg);
    const CertResult cert =
        certified_radius(prop.final_state.means[0], prop.final_state.cov, f.sigma);
    rows[i] = {static_cast<int>(i), data[i].label, cert.predicted, cert.p_lower, cert.radius};
    results[i] = {cert, data[i].label};
  });

  std::ostringstream csv;
  write_certification_csv(rows, csv);
  emit(f.out, csv.str());
  print_summary(results);
  return 0;
}

int cmd_mc_certify(const CommonFlags& f, int n0, long n, double alpha) {
  const NetworkSpec net = load_network_file(f.model);
  const Dataset data = load_dataset_file(f.data);
  MCConfig cfg;
  cfg.n0 = n0;
  cfg.n = n;
  cfg.alpha = alpha;
  cfg.sigma = f.sigma;
  cfg.validate();
  if (cfg.wants_more_samples()) {
    std::fprintf(stderr,
                 "warning: n = %ld is below 10*n0 = %d; selection noise will "
                 "dominate the certificate\n",
                 n, 10 * n0);
  }

  std::ostringstream csv;
  csv << "sample_id,true_label,predicted,p_lower,radius,abstained\n";
  char buf[160];
  std::vector<std::pair<CertResult, int>> results(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    MCConfig per = cfg;
    per.seed = mix_seed(f.seed, i);
    const MCReport report = mc_certify(net, data[i].image, per);
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%.12g,%.12g,%d\n", static_cast<int>(i),
                  data[i].label, report.predicted, report.p_lower, report.radius,
                  report.abstained ? 1 : 0);
    csv << buf;
    CertResult as_cert;
    as_cert.predicted = report.predicted;
    as_cert.p_lower = report.p_lower;
    as_cert.radius = report.radius;  // abstentions carry radius 0
    results[i] = {as_cert, data[i].label};
  }
  emit(f.out, csv.str());
  print_summary(results);
  return 0;
}

int cmd_compare(const CommonFlags& f, long n) {
  const NetworkSpec net = load_network_file(f.model);
  const Dataset data = load_dataset_file(f.data);
  const BoundConfig cfg{f.rmax, f.sigma};
  const Image& x = data.front().image;

  const PropagationResult prop = propagate_all(net, x, cfg);
  const std::vector<LayerMoments> sampled = mc_layer_moments(net, x, f.sigma, n, f.seed);
  const std::vector<TightnessRow> tight = tightness_report(net, x, cfg);
  if (prop.trace.size() != sampled.size() || prop.trace.size() != tight.size()) {
    throw_error(ErrorKind::numeric, "internal error: oracle layer counts disagree (" +
                                        std::to_string(prop.trace.size()) + " vs " +
                                        std::to_string(sampled.size()) + " vs " +
                                        std::to_string(tight.size()) + ")");
  }

  const auto trace_of = [](const Matrix& m) {
    double t = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) t += m(i, i);
    return t;
  };
  const auto max_diag = [](const Matrix& m) {
    double t = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) t = std::max(t, m(i, i));
    return t;
  };

  std::ostringstream csv;
  csv << "layer_index,layer_kind,N,prop_trace_cov,prop_max_diag,mc_trace_cov,mc_max_diag,"
         "mc_max_cross_corr,box_log_volume,cov_log_volume\n";
  char buf[320];
  for (std::size_t j = 0; j < prop.trace.size(); ++j) {
    const char* kind = j == 0 ? "input" : net.layers[j - 1].kind_name();
    std::snprintf(buf, sizeof buf, "%d,%s,%d,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n",
                  static_cast<int>(j), kind, prop.trace[j].channels,
                  trace_of(prop.trace[j].cov), max_diag(prop.trace[j].cov),
                  trace_of(sampled[j].cov), max_diag(sampled[j].cov),
                  sampled[j].max_cross_pixel_corr, tight[j].box_log_volume,
                  tight[j].cov_log_volume);
    csv << buf;
  }
  emit(f.out, csv.str());
  return 0;
}

int cmd_train(const CommonFlags& f, double lambda, double gamma, int epochs, double noise_rate,
              const std::string& mode) {
  if (f.out.empty()) {
    throw_error(ErrorKind::validation, "train: --out is required (checkpoint path)");
  }
  if (mode != "plain" && mode != "finetune") {
    throw_error(ErrorKind::validation, "train: --mode must be plain or finetune");
  }
  Dataset data = load_dataset_file(f.data);
  const int classes = dataset_class_count(data);
  NetworkSpec net;
  if (f.model.empty()) {
    const Image& first = data.front().image;
    net = build_lenet_small(Shape{first.height, first.width, first.channels}, classes, f.seed);
  } else {
    net = load_network_file(f.model);
  }
  if (noise_rate > 0.0) {
    data = pair_flip_labels(data, noise_rate, net.class_count, mix_seed(f.seed, 0x6e01));
  }

  TrainConfig cfg;
  cfg.loss.lambda = lambda;
  cfg.loss.gamma = gamma;
  cfg.loss.sigma = f.sigma;
  cfg.loss.lambda_activation_epoch = epochs / 2;
  cfg.loss.lr_schedule = {{0, 0.08}};
  if (epochs >= 4) cfg.loss.lr_schedule.push_back({3 * epochs / 4, 0.02});
  cfg.r_max = f.rmax;
  cfg.epochs = epochs;
  cfg.batch_size = 30;

  const TrainResult result = mode == "finetune"
                                 ? noisy_label_finetune(std::move(net), data, cfg, f.seed)
                                 : train_loop(std::move(net), data, cfg, f.seed);
  save_network_file(result.net, f.out);
  std::ostringstream metrics;
  write_metrics_csv(result.metrics, metrics);
  emit(f.out + ".metrics.csv", metrics.str());
  const EpochMetrics& last = result.metrics.back();
  std::printf("final epoch %d: clean_acc %.4f, acr %.6g\n", last.epoch, last.clean_acc,
              last.acr);
  return 0;
}

int cmd_cost(int k, int q, const std::string& mode_name) {
  const CostMode mode = cost_mode_from_string(mode_name);
  check_cost_args(k, q);
  std::printf("layers_back,sigma_count,cross_count\n");
  for (int i = 0; i <= q; ++i) {
    std::printf("%d,%llu,%llu\n", i,
                static_cast<unsigned long long>(cost_sigma_count(k, i, mode)),
                static_cast<unsigned long long>(cost_cross_count(k, i, mode)));
  }
  return 0;
}

int cmd_gen_data(const std::string& out, std::uint64_t seed, const std::string& mode, long n) {
  if (out.empty()) {
    throw_error(ErrorKind::validation, "gen-data: --out is required");
  }
  if (n < 1) {
    throw_error(ErrorKind::validation, "gen-data: --n must be positive");
  }
  Dataset data;
  if (mode == "quadrant") {
    data = quadrant_dataset(static_cast<int>(n), seed);
  } else if (mode == "two-class") {
    data = two_class_linear_dataset(static_cast<int>(n), seed);
  } else {
    throw_error(ErrorKind::validation, "gen-data: --mode must be quadrant or two-class");
  }
  save_dataset_file(data, out);
  std::printf("wrote %ld samples to %s\n", n, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moment-propagation certified robustness toolkit"};
  app.require_subcommand(1);

  CommonFlags f;
  int n0 = 100;
  long n_samples = 1000;
  double alpha = 0.001;
  double lambda = 0.0;
  double gamma = 2.0;
  int epochs = 40;
  double noise_rate = 0.0;
  std::string train_mode = "plain";
  std::string cost_mode = "no-overlap";
  std::string gen_mode = "quadrant";
  int cost_k = 0;
  int cost_q = 0;

  CLI::App* certify = app.add_subcommand("certify", "closed-form certification over a dataset");
  certify->add_option("--model", f.model)->required();
  certify->add_option("--data", f.data)->required();
  certify->add_option("--sigma", f.sigma);
  certify->add_option("--rmax", f.rmax);
  certify->add_option("--out", f.out);

  CLI::App* mc = app.add_subcommand("mc-certify", "Monte Carlo certification over a dataset");
  mc->add_option("--model", f.model)->required();
  mc->add_option("--data", f.data)->required();
  mc->add_option("--sigma", f.sigma);
  mc->add_option("--n0", n0);
  mc->add_option("--n", n_samples);
  mc->add_option("--alpha", alpha);
  mc->add_option("--seed", f.seed);
  mc->add_option("--out", f.out);

  CLI::App* compare =
      app.add_subcommand("compare", "per-layer propagated vs sampled vs interval volumes");
  compare->add_option("--model", f.model)->required();
  compare->add_option("--data", f.data)->required();
  compare->add_option("--sigma", f.sigma);
  compare->add_option("--rmax", f.rmax);
  compare->add_option("--n", n_samples);
  compare->add_option("--seed", f.seed);
  compare->add_option("--out", f.out);

  CLI::App* train = app.add_subcommand("train", "train or fine-tune a checkpoint");
  train->add_option("--model", f.model);
  train->add_option("--data", f.data)->required();
  train->add_option("--sigma", f.sigma);
  train->add_option("--rmax", f.rmax);
  train->add_option("--lambda", lambda);
  train->add_option("--gamma", gamma);
  train->add_option("--epochs", epochs);
  train->add_option("--noise-rate", noise_rate);
  train->add_option("--seed", f.seed);
  train->add_option("--out", f.out)->required();
  train->add_option("--mode", train_mode, "plain or finetune");

  CLI::App* cost = app.add_subcommand("cost", "second-moment bookkeeping counts");
  cost->add_option("k", cost_k, "kernel size")->required();
  cost->add_option("q", cost_q, "conv layers back from the output")->required();
  cost->add_option("--mode", cost_mode, "overlap or no-overlap");

  CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic dataset CSV");
  gen->add_option("--out", f.out)->required();
  gen->add_option("--seed", f.seed);
  gen->add_option("--n", n_samples);
  gen->add_option("--mode", gen_mode, "quadrant or two-class");

  try {
    app.parse(argc, argv);
    if (app.got_subcommand(certify)) return cmd_certify(f);
    if (app.got_subcommand(mc)) return cmd_mc_certify(f, n0, n_samples, alpha);
    if (app.got_subcommand(compare)) return cmd_compare(f, n_samples);
    if (app.got_subcommand(train))
      return cmd_train(f, lambda, gamma, epochs, noise_rate, train_mode);
    if (app.got_subcommand(cost)) return cmd_cost(cost_k, cost_q, cost_mode);
    if (app.got_subcommand(gen)) return cmd_gen_data(f.out, f.seed, gen_mode, n_samples);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 3;
  } catch (const covprop::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return 0;
}
