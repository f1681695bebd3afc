// Command-line driver: dataset synthesis, bilevel training, evaluation,
// single-image detection/enhancement, and a gradient self-check.
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpnet/checkpoint.hpp"
#include "dpnet/config.hpp"
#include "dpnet/dataset.hpp"
#include "dpnet/datasynth.hpp"
#include "dpnet/evaluate.hpp"
#include "dpnet/gradsuite.hpp"
#include "dpnet/image_io.hpp"
#include "dpnet/model.hpp"
#include "dpnet/trainer.hpp"

namespace {

using namespace dpnet;

Config load_config(const std::string& path,
                   const std::vector<std::string>& overrides) {
  if (path.empty()) return Config::from_text("", overrides);
  return Config::from_file(path, overrides);
}

Model fresh_model(const Config& cfg) {
  ModelSpec spec = ModelSpec::from_config(cfg);
  Rng rng(Rng::derive(static_cast<std::uint64_t>(cfg.get_int("trainer.seed")),
                      100, 0));
  return Model::init(spec, rng);
}

// Loads weights for inference-style commands: a config digest mismatch is
// reported but not fatal, unlike training resume.
LoadReport load_for_inference(const std::string& ckpt, Model& m,
                              const Config& cfg, LoadScope scope) {
  LoadReport rep = load_checkpoint(ckpt, m, nullptr, cfg.digest(),
                                   /*require_digest_match=*/false, scope);
  if (!rep.digest_match)
    std::cerr << "warning: checkpoint " << ckpt
              << " was written with a different configuration\n";
  if (!rep.skipped.empty())
    std::cerr << "note: skipped " << rep.skipped.size()
              << " checkpoint entries outside the requested scope\n";
  return rep;
}

int run_synth(const Config& cfg, const std::string& out, bool overwrite) {
  SynthParams p = SynthParams::from_config(cfg);
  const std::string root = out.empty() ? cfg.get_string("data.root") : out;
  synthesize_dataset(p, root, overwrite);
  const size_t n = verify_manifest_replay(root);
  std::cout << "synthesized " << p.train_count << "/" << p.val_count << "/"
            << p.test_count << " train/val/test images at " << root
            << " (manifest replay verified " << n << " samples)" << std::endl;
  return 0;
}

int run_train(const Config& cfg, const std::string& data_root,
              const std::string& out, const std::string& resume) {
  const std::string root =
      data_root.empty() ? cfg.get_string("data.root") : data_root;
  Dataset data = Dataset::load(root);
  Model m = fresh_model(cfg);
  Trainer tr(m, data, cfg);
  tr.run(out, resume);
  std::cout << "training complete; checkpoint and metrics written to " << out
            << std::endl;
  return 0;
}

int run_eval(const Config& cfg, const std::string& data_root,
             const std::string& ckpt, const std::string& split_name) {
  const std::string root =
      data_root.empty() ? cfg.get_string("data.root") : data_root;
  Dataset data = Dataset::load(root);
  Model m = fresh_model(cfg);
  load_for_inference(ckpt, m, cfg, LoadScope::All);
  Split split = Split::Test;
  if (split_name == "train") split = Split::Train;
  else if (split_name == "val") split = Split::Val;
  else if (split_name != "test")
    throw UsageError("unknown split '" + split_name + "'");
  EvalReport rep = evaluate_split(m, data.split(split));
  std::cout << eval_report_text(rep);
  return 0;
}

int run_detect(const Config& cfg, const std::string& ckpt,
               const std::string& image_path, const std::string& out) {
  Model m = fresh_model(cfg);
  load_for_inference(ckpt, m, cfg, LoadScope::All);
  Tensor img = read_ppm(image_path);
  InferResult res = infer(m, img, InferMode::DetectOnly);
  std::ostringstream os;
  os << std::setprecision(10);
  for (const auto& d : res.dets)
    os << d.class_id << " " << d.score << " " << d.box.x0 << " " << d.box.y0
       << " " << d.box.x1 << " " << d.box.y1 << "\n";
  if (out.empty())
    std::cout << os.str();
  else
    atomic_write(out, os.str());
  std::cerr << res.dets.size() << " detections\n";
  return 0;
}

int run_enhance(const Config& cfg, const std::string& ckpt,
                const std::string& image_path, const std::string& out) {
  Model m = fresh_model(cfg);
  load_for_inference(ckpt, m, cfg, LoadScope::EnhanceOnly);
  Tensor img = read_ppm(image_path);
  InferResult res = infer(m, img, InferMode::EnhanceOnly);
  write_ppm(out, res.enhanced);
  std::cout << "enhanced image written to " << out << std::endl;
  return 0;
}

int run_gradcheck() {
  const double tol = 1e-4;
  auto cases = run_gradcheck_suite(tol);
  std::cout << gradsuite_table(cases, tol);
  return gradsuite_all_pass(cases) ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "dpnet: joint underwater image enhancement and object detection"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "config file (key = value lines)");
  app.add_option("--set", overrides, "override, e.g. --set trainer.lr=0.001");

  // fallthrough lets the global --config/--set options appear after the
  // subcommand name as well as before it.
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->fallthrough();
  std::string synth_out;
  bool synth_overwrite = false;
  synth->add_option("--out", synth_out, "dataset root (default data.root)");
  synth->add_flag("--overwrite", synth_overwrite,
                  "replace an existing dataset directory");

  auto* train = app.add_subcommand("train", "run bilevel training");
  train->fallthrough();
  std::string train_data, train_out = "runs/default", train_resume;
  train->add_option("--data", train_data, "dataset root (default data.root)");
  train->add_option("--out", train_out, "output directory for checkpoints");
  train->add_option("--resume", train_resume, "checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->fallthrough();
  std::string eval_data, eval_ckpt, eval_split = "test";
  eval->add_option("--data", eval_data, "dataset root (default data.root)");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--split", eval_split, "train|val|test (default test)");

  auto* detect = app.add_subcommand("detect", "detect objects in one image");
  detect->fallthrough();
  std::string det_ckpt, det_image, det_out;
  detect->add_option("--checkpoint", det_ckpt, "checkpoint file")->required();
  detect->add_option("--image", det_image, "input PPM image")->required();
  detect->add_option("--out", det_out, "write detections here (else stdout)");

  auto* enhance = app.add_subcommand("enhance", "enhance one image");
  enhance->fallthrough();
  std::string enh_ckpt, enh_image, enh_out = "enhanced.ppm";
  enhance->add_option("--checkpoint", enh_ckpt, "checkpoint file")->required();
  enhance->add_option("--image", enh_image, "input PPM image")->required();
  enhance->add_option("--out", enh_out, "output PPM path");

  app.add_subcommand("gradcheck",
                     "compare analytic gradients with finite differences")
      ->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const Config cfg = load_config(config_path, overrides);
    if (app.got_subcommand("synth"))
      return run_synth(cfg, synth_out, synth_overwrite);
    if (app.got_subcommand("train"))
      return run_train(cfg, train_data, train_out, train_resume);
    if (app.got_subcommand("eval"))
      return run_eval(cfg, eval_data, eval_ckpt, eval_split);
    if (app.got_subcommand("detect"))
      return run_detect(cfg, det_ckpt, det_image, det_out);
    if (app.got_subcommand("enhance"))
      return run_enhance(cfg, enh_ckpt, enh_image, enh_out);
    if (app.got_subcommand("gradcheck")) return run_gradcheck();
    throw UsageError("no subcommand selected");
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
