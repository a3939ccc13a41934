// ledet: experiment driver. Every command resolves the config (profile, file,
// --set overrides), writes it under the output root and produces its
// artifacts there. LEDET_OUTPUT_ROOT overrides the config's output_dir.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ledet/checkpoint.hpp"
#include "ledet/experiment.hpp"
#include "ledet/plot.hpp"

namespace fs = std::filesystem;
using namespace ledet;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 1;
  bool force = false;
};

struct Run {
  Config cfg;
  fs::path root;
  std::uint64_t seed;
  bool force;

  fs::path dir(const std::string& sub) const {
    const auto d = root / sub;
    fs::create_directories(d);
    return d;
  }
  fs::path checkpoint(const std::string& stage) const { return dir("checkpoints") / (stage + ".ckpt"); }
  fs::path metrics(const std::string& stage) const { return dir("logs") / (stage + "_metrics.csv"); }
  fs::path report(const std::string& name) const { return dir("reports") / (name + ".json"); }

  // Identity of a training run for resumption: everything but the output location.
  std::string hash() const {
    Config c = cfg;
    c.erase("output_dir");
    return fnv1a_hex(c.dump() + "#seed=" + std::to_string(seed));
  }
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

void write_json(const fs::path& p, const nlohmann::ordered_json& j) { write_text(p, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  return nlohmann::json::parse(f);
}

Run open_run(const Common& c, const std::string& command) {
  Run r{resolve_config(c.config_path, c.overrides), {}, c.seed, c.force};
  const char* env = std::getenv("LEDET_OUTPUT_ROOT");
  r.root = env && *env ? fs::path(env) : fs::path(get<std::string>(r.cfg, "output_dir"));
  fs::create_directories(r.root);
  auto resolved = r.cfg;
  resolved["output_dir"] = r.root.string();
  write_json(r.dir("resolved") / (command + ".json"), resolved);
  return r;
}

/// Loads `path` when it was produced by an identical run; nullopt means train.
std::optional<Checkpoint> reusable(const Run& run, const fs::path& path) {
  if (!fs::exists(path) || run.force) return std::nullopt;
  auto ck = load_checkpoint(path.string());
  if (ck.config_hash != run.hash()) {
    throw std::runtime_error("checkpoint " + path.string() +
                             " was produced by a different config or seed; pass --force to retrain");
  }
  std::cout << "reusing " << path.string() << "\n";
  return ck;
}

std::function<void(const StepLog&)> logger(const fs::path& path, int every) {
  fs::remove(path);
  auto log = std::make_shared<MetricsLog>(path.string());
  return [log, every](const StepLog& s) {
    log->append(s);
    if (every > 0 && s.step % every == 0) {
      std::cout << "  step " << s.step << " total " << s.total << " pseudo " << s.num_pseudo << "\n" << std::flush;
    }
  };
}

int log_every(const TrainingConfig& t) { return std::max(1, t.schedule.iterations / 10); }

Checkpoint checkpoint_from(const StageResult& r, Stage stage, const std::vector<int>& class_ids, const Run& run,
                           long long steps) {
  Checkpoint ck;
  ck.stage = stage_name(stage);
  ck.class_ids = class_ids;
  ck.config_hash = run.hash();
  ck.step = steps;
  ck.student = r.student;
  ck.teacher = r.teacher;
  return ck;
}

// ----------------------------------------------------------------------------

int cmd_split(const Common& c) {
  const Run run = open_run(c, "split");
  const Benchmark b = load_benchmark(run.cfg, run.seed);
  write_json(run.dir("split") / "partition.json", b.partition.to_json());
  write_text(run.dir("split") / "few_shot_split.json", b.split.serialize());
  std::cout << "labeled " << b.partition.labeled.size() << " / unlabeled " << b.partition.unlabeled.size() << " images; "
            << b.split.shot_instances.size() << " classes at k=" << b.split.k << "\n";
  return 0;
}

int cmd_synth(const Common& c) {
  const Run run = open_run(c, "synth");
  if (get<std::string>(run.cfg, "dataset.kind") != "synthetic") throw ConfigError("config key 'dataset.kind' must be synthetic for synth");
  const Benchmark b = load_benchmark(run.cfg, run.seed);
  const auto images = run.dir("synth/images");
  auto dump = [&](const DatasetIndex& index, const std::vector<Image>& pix, const std::string& name) {
    save_coco_json((run.dir("synth") / (name + ".json")).string(), index);
    for (std::size_t i = 0; i < pix.size(); ++i) write_png((images / index.images()[i].file_name).string(), pix[i]);
  };
  dump(b.train_index, b.train_images, "train");
  dump(b.test_index, b.test_images, "test");
  std::cout << "wrote " << b.train_images.size() << " train and " << b.test_images.size() << " test images to "
            << run.dir("synth").string() << "\n";
  return 0;
}

Checkpoint ensure_pretrain(const Run& run, const Benchmark& b) {
  const auto path = run.checkpoint("pretrain");
  if (auto ck = reusable(run, path)) return *ck;
  const auto tc = training_config(run.cfg, Stage::base_pretrain, run.seed);
  const auto arch = arch_from_config(run.cfg, static_cast<int>(b.base_classes.size()));
  std::cout << "pretraining for " << tc.schedule.iterations << " steps\n";
  auto ck = pretrain_base(arch, b.base_classes, tc, pretrain_data(b), run.hash(), logger(run.metrics("pretrain"), log_every(tc)));
  save_checkpoint(path.string(), ck);
  const auto rep = evaluate_model(ck.teacher_or_throw(), b.base_classes, b.base_classes, {}, b.test_index, b.test_images, run.cfg);
  write_json(run.report("pretrain"), rep.to_json());
  std::cout << "base AP " << rep.base_ap << "\n";
  return ck;
}

int cmd_pretrain(const Common& c) {
  const Run run = open_run(c, "pretrain");
  const Benchmark b = load_benchmark(run.cfg, run.seed);
  ensure_pretrain(run, b);
  return 0;
}

int cmd_finetune(const Common& c) {
  const Run run = open_run(c, "finetune");
  const Benchmark b = load_benchmark(run.cfg, run.seed);
  const auto pre_path = run.checkpoint("pretrain");
  if (!fs::exists(pre_path)) throw std::runtime_error("no pretrain checkpoint at " + pre_path.string() + "; run pretrain first");
  const Checkpoint pre = load_checkpoint(pre_path.string());

  Rng init = make_rng(run.seed, 0xF5);
  const auto fs_model = init_few_shot_from_teacher(pre, b.novel_classes, get<double>(run.cfg, "schedule.novel_init_std"), init);

  Checkpoint head;
  if (auto ck = reusable(run, run.checkpoint("novel_head"))) {
    head = *ck;
  } else {
    const auto tc = training_config(run.cfg, Stage::novel_head, run.seed);
    const auto data = novel_head_data(b, fs_model.class_ids, get<bool>(run.cfg, "schedule.novel_head_includes_base"));
    std::cout << "novel-head training for " << tc.schedule.iterations << " steps\n";
    const auto r = train_novel_head(fs_model.params, data, tc, logger(run.metrics("novel_head"), log_every(tc)));
    head = checkpoint_from(r, Stage::novel_head, fs_model.class_ids, run, tc.schedule.iterations);
    save_checkpoint(run.checkpoint("novel_head").string(), head);
  }

  if (reusable(run, run.checkpoint("balanced"))) return 0;
  const auto tc = training_config(run.cfg, Stage::balanced_finetune, run.seed);
  std::cout << "balanced fine-tune for " << tc.schedule.iterations << " steps\n";
  const auto r = finetune_balanced(head.teacher_or_throw(), balanced_data(b, head.class_ids), b.split.k, tc,
                                   logger(run.metrics("balanced"), log_every(tc)));
  save_checkpoint(run.checkpoint("balanced").string(), checkpoint_from(r, Stage::balanced_finetune, head.class_ids, run, tc.schedule.iterations));
  return 0;
}

std::optional<double> reference_base_ap(const Run& run) {
  const Config& ref = run.cfg["eval"]["base_ap_pretrain"];
  if (ref.is_number()) return ref.get<double>();
  const auto p = run.report("pretrain");
  if (fs::exists(p)) {
    const auto j = read_json(p);
    if (j["base_AP"].is_number()) return j["base_AP"].get<double>();
  }
  return std::nullopt;
}

int cmd_eval(const Common& c, std::string checkpoint, std::string out) {
  const Run run = open_run(c, "eval");
  if (checkpoint.empty()) checkpoint = run.checkpoint("balanced").string();
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Benchmark b = load_benchmark(run.cfg, run.seed);
  const auto rep = evaluate_model(ck.teacher_or_throw(), ck.class_ids, b.base_classes, b.novel_classes, b.test_index,
                                  b.test_images, run.cfg, reference_base_ap(run));
  if (out.empty()) out = run.report("eval").string();
  auto j = rep.to_json();
  j["checkpoint"] = checkpoint;
  j["stage"] = ck.stage;
  write_json(out, j);
  std::cout << "base AP " << rep.base_ap << "  novel AP " << rep.novel_ap << "  overall AP " << rep.overall_ap << "\n"
            << "report: " << out << "\n";
  return 0;
}

int cmd_proposals(const Common& c, std::string checkpoint) {
  const Run run = open_run(c, "proposals");
  if (checkpoint.empty()) checkpoint = run.checkpoint("pretrain").string();
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Benchmark b = load_benchmark(run.cfg, run.seed);
  const auto inf = run_inference(ck.teacher_or_throw(), ck.class_ids, b.test_index, b.test_images, run.cfg);
  std::ostringstream lines;
  for (const auto& p : inf.proposals) {
    nlohmann::ordered_json j{{"image_id", p.image_id}, {"box", {p.box.x1, p.box.y1, p.box.x2, p.box.y2}}, {"score", p.score}};
    lines << j.dump() << "\n";
  }
  write_text(run.dir("proposals") / "proposals.jsonl", lines.str());

  // recall against the classes the checkpoint was trained on
  std::set<int> trained(ck.class_ids.begin(), ck.class_ids.end());
  std::vector<GroundTruth> gt;
  for (const auto& g : ground_truth(b.test_index)) {
    if (trained.count(g.class_id)) gt.push_back(g);
  }
  nlohmann::ordered_json ar = nlohmann::ordered_json::object();
  for (int p : get<std::vector<int>>(run.cfg, "eval.ar_limits")) {
    const auto v = proposal_recall_at(inf.proposals, gt, static_cast<std::size_t>(p));
    ar["AR@" + std::to_string(p)] = v ? nlohmann::ordered_json(*v) : nullptr;
    std::cout << "AR@" << p << " " << (v ? std::to_string(*v) : "n/a") << "\n";
  }
  write_json(run.report("proposals"), {{"checkpoint", checkpoint}, {"proposal_AR", ar}});
  return 0;
}

std::vector<Series> loss_series(const fs::path& csv) {
  std::ifstream f(csv);
  std::string line;
  std::getline(f, line);
  std::vector<std::string> names;
  {
    std::stringstream ss(line);
    for (std::string h; std::getline(ss, h, ',');) names.push_back(h);
  }
  std::vector<Series> out;
  for (const char* col : {"L_sup", "L_cls_soft", "L_reg_soft", "L_ent", "L_iou", "total"}) out.push_back({col, {}, {}, true});
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::vector<double> v;
    for (std::string x; std::getline(ss, x, ',');) v.push_back(std::stod(x));
    if (v.size() != names.size()) throw std::runtime_error("malformed row in " + csv.string());
    for (auto& s : out) {
      const auto k = static_cast<std::size_t>(std::find(names.begin(), names.end(), s.name) - names.begin());
      s.x.push_back(v[0]);
      s.y.push_back(v.at(k));
    }
  }
  return out;
}

int cmd_plot(const Common& c, const std::vector<std::string>& reports, int ar_limit) {
  const Run run = open_run(c, "plot");
  const auto plots = run.dir("plots");
  int made = 0;
  for (const char* stage : {"pretrain", "novel_head", "balanced"}) {
    const auto csv = run.metrics(stage);
    if (!fs::exists(csv)) continue;
    const auto series = loss_series(csv);
    if (series.front().x.empty()) continue;
    emit_plot((plots / (std::string(stage) + "_losses")).string(), series, {std::string(stage) + " losses", "step", "loss"});
    ++made;
  }
  if (!reports.empty()) {
    // proposal quality vs detection quality across runs
    Series s{"runs", {}, {}, false};
    const std::string key = "AR@" + std::to_string(ar_limit);
    for (const auto& p : reports) {
      const auto j = read_json(p);
      const auto& ar = j.at("proposal_AR").at(key);
      const auto& ap = j.at("novel_AP").is_number() ? j.at("novel_AP") : j.at("base_AP");
      if (!ar.is_number() || !ap.is_number()) throw std::runtime_error(p + " lacks " + key + " or an AP value");
      s.x.push_back(ar.get<double>());
      s.y.push_back(ap.get<double>());
    }
    emit_plot((plots / "ar_vs_ap").string(), {s}, {"AP vs AR", key, "AP"});
    nlohmann::ordered_json j{{"reports", reports}, {"x", key}};
    j["spearman"] = s.x.size() >= 2 ? nlohmann::ordered_json(spearman(s.x, s.y)) : nullptr;
    write_json(plots / "ar_vs_ap.json", j);
    ++made;
  }
  if (made == 0) throw std::runtime_error("plot: no metrics logs under " + run.root.string() + " and no --report given");
  std::cout << "wrote " << made << " plot(s) to " << plots.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot detection with semi-supervised pretraining and cross-view consistency"};
  app.require_subcommand(1);
  Common common;
  std::string checkpoint, out;
  std::vector<std::string> reports;
  int ar_limit = 300;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "JSON config (optional 'profile' key selects desk or coco)");
    sub->add_option("-s,--set", common.overrides, "override, e.g. --set split.k=5")->allow_extra_args(false);
    sub->add_option("--seed", common.seed, "seed for splits, sampling and initialization")->capture_default_str();
    return sub;
  };
  auto* split = add_common(app.add_subcommand("split", "write the labeled partition and the k-shot split"));
  auto* synth = add_common(app.add_subcommand("synth", "render the synthetic benchmark to COCO JSON + PNG"));
  auto* pretrain = add_common(app.add_subcommand("pretrain", "base-class training (resumes from an existing checkpoint)"));
  auto* finetune = add_common(app.add_subcommand("finetune", "novel-head training then balanced fine-tune"));
  auto* eval = add_common(app.add_subcommand("eval", "generalized base/novel report for a checkpoint"));
  auto* proposals = add_common(app.add_subcommand("proposals", "dump proposals as JSON lines and report AR@p"));
  auto* plot = add_common(app.add_subcommand("plot", "loss curves from the logs; AP-vs-AR scatter from reports"));
  for (auto* sub : {pretrain, finetune}) sub->add_flag("--force", common.force, "retrain even if a checkpoint exists");
  eval->add_option("--checkpoint", checkpoint, "defaults to the balanced fine-tune checkpoint");
  eval->add_option("-o,--out", out, "report path (default <root>/reports/eval.json)");
  proposals->add_option("--checkpoint", checkpoint, "defaults to the pretrain checkpoint");
  plot->add_option("--report", reports, "eval or proposal-bearing report JSON (repeatable)");
  plot->add_option("--ar-limit", ar_limit, "p of AR@p on the scatter x axis")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (split->parsed()) return cmd_split(common);
    if (synth->parsed()) return cmd_synth(common);
    if (pretrain->parsed()) return cmd_pretrain(common);
    if (finetune->parsed()) return cmd_finetune(common);
    if (eval->parsed()) return cmd_eval(common, checkpoint, out);
    if (proposals->parsed()) return cmd_proposals(common, checkpoint);
    if (plot->parsed()) return cmd_plot(common, reports, ar_limit);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
