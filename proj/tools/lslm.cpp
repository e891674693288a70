#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "lslm/ablation.hpp"
#include "lslm/checkpoint.hpp"
#include "lslm/errors.hpp"
#include "lslm/eval.hpp"
#include "lslm/protocol.hpp"
#include "lslm/server.hpp"
#include "lslm/trainer.hpp"
#include "lslm/version.hpp"
#include "lslm/world.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lslm;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string scenario;
  std::string fusion;
  std::string condition = "clean";
  std::string speaking_init, listening_init, speaking_ckpt, listening_ckpt;
  std::string vanilla_ckpt, listener_ckpt;
  std::optional<int> steps, epochs, batch_size, warmup, eval_every, log_every, max_val;
  std::optional<int> n_train, n_val;
  std::optional<int> threads;
  std::size_t limit = 0, tts_limit = 0, interactive_limit = 0;
  std::string host = "127.0.0.1";
  int port = 7070, http_port = 7071;
  std::optional<int> tick_ms;
  std::optional<std::uint64_t> world_seed;
};

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

json config_section(const Options& o, const char* name) {
  if (o.config.empty()) return json::object();
  const json c = read_json_file(o.config);
  return c.contains(name) ? c.at(name) : json::object();
}

const std::string& require(const std::string& value, const char* field) {
  if (value.empty()) throw ConfigError(std::string("missing required field '") + field + "'");
  return value;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  os << text;
}

void write_manifest(const fs::path& dir, const std::string& subcommand, const json& resolved, std::uint64_t seed) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  write_json(dir / "manifest.json", {{"subcommand", subcommand},
                                     {"seed", seed},
                                     {"config", resolved},
                                     {"versions",
                                      {{"lslm", kVersionString},
                                       {"vocab", vocab::kVersion},
                                       {"checkpoint_format", kCheckpointFormatVersion}}},
                                     {"created", stamp}});
}

world::Dataset load_data(const Options& o) { return world::read_dataset(require(o.data, "data")); }

ModelConfig model_config(const Options& o) {
  ModelConfig mc = config_section(o, "model").get<ModelConfig>();
  if (!o.fusion.empty()) mc.fusion = parse_fusion(o.fusion);
  mc.validate();
  return mc;
}

TrainConfig train_config(const Options& o) {
  TrainConfig tc = config_section(o, "train").get<TrainConfig>();
  if (o.seed) tc.seed = *o.seed;
  if (o.steps) tc.total_steps = *o.steps;
  if (o.epochs) tc.epochs = *o.epochs;
  if (o.batch_size) tc.batch_size = *o.batch_size;
  if (o.warmup) tc.warmup_steps = *o.warmup;
  if (o.eval_every) tc.eval_every = *o.eval_every;
  if (o.log_every) tc.log_every = *o.log_every;
  if (o.max_val) tc.max_val_items = *o.max_val;
  if (!o.speaking_init.empty()) tc.speaking_init = parse_init_mode(o.speaking_init);
  if (!o.listening_init.empty()) tc.listening_init = parse_init_mode(o.listening_init);
  if (!o.speaking_ckpt.empty()) tc.speaking_checkpoint = o.speaking_ckpt;
  if (!o.listening_ckpt.empty()) tc.listening_checkpoint = o.listening_ckpt;
  tc.validate();
  return tc;
}

eval::EvalOptions eval_options(const Options& o, int mu_frames) {
  const json e = config_section(o, "eval");
  eval::EvalOptions eo;
  eo.sampler = e.value("sampler", json::object()).get<SamplerConfig>();
  eo.threads = e.value("threads", 1);
  eo.noise_seed = e.value("noise_seed", std::uint64_t{0});
  if (o.seed) {
    eo.sampler.seed = derive_seed(*o.seed, "sampling");
    eo.noise_seed = derive_seed(*o.seed, "noise");
  }
  if (o.threads) eo.threads = *o.threads;
  eo.mu_frames = mu_frames;
  eo.sampler.validate();
  return eo;
}

json eval_options_json(const eval::EvalOptions& eo) {
  return {{"sampler", eo.sampler}, {"threads", eo.threads}, {"noise_seed", eo.noise_seed}, {"mu_frames", eo.mu_frames}};
}

LslmModel load_model(const Options& o) {
  const auto& path = require(o.checkpoint, "checkpoint");
  if (!fs::exists(path)) throw ConfigError("checkpoint file " + path + " does not exist");
  return LslmModel::load(path);
}

template <typename T>
std::vector<T> first_n(const std::vector<T>& v, std::size_t n) {
  if (n == 0 || n >= v.size()) return v;
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n)};
}

// ------------------------------------------------------------ subcommands

int cmd_make_data(const Options& o) {
  world::WorldConfig wc = config_section(o, "world").get<world::WorldConfig>();
  if (!o.scenario.empty()) wc.scenario = world::parse_scenario(o.scenario);
  if (o.seed) wc.seed = *o.seed;
  if (o.n_train) wc.n_train = *o.n_train;
  if (o.n_val) wc.n_val = *o.n_val;
  wc.validate();
  const fs::path out = require(o.out, "out");
  const auto data = world::make_dataset(wc);
  world::write_dataset(data, out);
  write_manifest(out, "make-data", {{"world", wc}}, wc.seed);
  std::cout << "wrote " << data.train.size() << " train, " << data.val.size() << " val, " << data.test.size()
            << " test, " << data.tts_test.size() << " tts_test records to " << out << '\n';
  return 0;
}

int cmd_pretrain_tts(const Options& o) {
  const auto data = load_data(o);
  const auto tc = train_config(o);
  const auto mc = model_config(o);
  const fs::path out = require(o.out, "out");
  auto r = pretrain_tts(tc, mc, to_examples(data.train), to_examples(data.val));
  r.model.save(out / "model.ckpt");
  r.log.write_jsonl(out / "train_log.jsonl");
  write_manifest(out, "pretrain-tts", {{"train", tc}, {"model", r.model.config()}, {"data", o.data}}, tc.seed);
  if (auto b = r.log.best_record()) std::cout << "best validation loss " << b->loss << " at step " << b->step << '\n';
  return 0;
}

int cmd_pretrain_listener(const Options& o) {
  const auto data = load_data(o);
  const auto tc = train_config(o);
  const auto mc = model_config(o);
  const fs::path out = require(o.out, "out");
  auto r = pretrain_listener(tc, mc, to_examples(data.train), to_examples(data.val));
  save_listener(r.model, out / "listener.ckpt");
  r.log.write_jsonl(out / "train_log.jsonl");
  write_manifest(out, "pretrain-listener",
                 {{"train", tc}, {"model", r.model.config()}, {"data", o.data}, {"val_accuracy", r.val_accuracy}},
                 tc.seed);
  std::cout << "frame accuracy " << r.val_accuracy << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  const auto data = load_data(o);
  const auto tc = train_config(o);
  const auto mc = model_config(o);
  const fs::path out = require(o.out, "out");
  auto r = train_lslm(tc, mc, to_examples(data.train), to_examples(data.val));
  r.model.save(out / "model.ckpt");
  r.log.write_jsonl(out / "train_log.jsonl");
  write_manifest(out, "train", {{"train", tc}, {"model", r.model.config()}, {"data", o.data}}, tc.seed);
  if (auto b = r.log.best_record()) std::cout << "best validation loss " << b->loss << " at step " << b->step << '\n';
  return 0;
}

int cmd_eval_tts(const Options& o) {
  const auto model = load_model(o);
  const auto data = load_data(o);
  const world::World w(data.config);
  const auto eo = eval_options(o, data.config.mu_frames);
  const fs::path out = require(o.out, "out");
  const auto report = eval::run_tts_eval(model, first_n(data.tts_test, o.limit), w.codebook(), eo);
  write_json(out / "tts_report.json", report);
  write_manifest(out, "eval-tts", {{"checkpoint", o.checkpoint}, {"data", o.data}, {"eval", eval_options_json(eo)}},
                 eo.sampler.seed);
  std::cout << "transcript error rate " << report.transcript_error_rate << ", token error rate "
            << report.token_error_rate << " over " << report.n_utterances << " utterances\n";
  return 0;
}

int cmd_eval_interactive(const Options& o) {
  const auto model = load_model(o);
  const auto data = load_data(o);
  const auto eo = eval_options(o, data.config.mu_frames);
  const auto condition = eval::parse_condition(o.condition);
  const fs::path out = require(o.out, "out");
  const auto report = eval::run_interactive_eval(model, eval::balanced_subset(data.test, o.limit), condition, eo);
  write_json(out / ("interactive_" + eval::to_string(condition) + ".json"), report);
  write_manifest(out, "eval-interactive",
                 {{"checkpoint", o.checkpoint}, {"data", o.data}, {"condition", o.condition}, {"eval", eval_options_json(eo)}},
                 eo.sampler.seed);
  const auto& m = report.metrics;
  const auto& c = report.counts;
  std::cout << eval::to_string(condition) << ": precision " << m.precision << " recall " << m.recall << " f1 " << m.f1
            << " (tp " << c.tp << " fn " << c.fn << " fp " << c.fp << " tn " << c.tn << ")\n";
  for (const auto& d : m.degenerate) std::cerr << "warning: " << d << " has a zero denominator\n";
  return 0;
}

int cmd_trace_irq(const Options& o) {
  const auto model = load_model(o);
  const auto data = load_data(o);
  const auto eo = eval_options(o, data.config.mu_frames);
  const fs::path out = require(o.out, "out");
  std::vector<world::SampleRecord> interrupted;
  for (const auto& r : data.test) {
    if (r.interrupted()) interrupted.push_back(r);
  }
  interrupted = first_n(interrupted, o.limit);
  const auto report = eval::run_interactive_eval(model, interrupted, eval::Condition::Clean, eo);
  std::vector<eval::TraceInput> inputs;
  json traces = json::array();
  for (std::size_t i = 0; i < report.items.size(); ++i) {
    const auto& it = report.items[i];
    inputs.push_back({it.irq_trace, *it.onset, it.stop});
    OfflineResult r{interrupted[i].context, {}, it.stop, it.irq_trace};
    traces.push_back(trace_json(r, it.onset));
  }
  const auto stats = eval::irq_trace_stats(inputs, data.config.mu_frames);
  write_json(out / "irq_traces.json", traces);
  write_json(out / "irq_stats.json", stats);
  write_manifest(out, "trace-irq", {{"checkpoint", o.checkpoint}, {"data", o.data}, {"eval", eval_options_json(eo)}},
                 eo.sampler.seed);
  std::cout << "rise ratio >= 10 for " << stats.fraction_ratio_ge_10 * 100.0 << "% of " << stats.n_items
            << " items; median curve monotone after onset: " << (stats.monotone_after_onset ? "yes" : "no") << '\n';
  return 0;
}

int cmd_ablation(const Options& o) {
  const auto data = load_data(o);
  const fs::path out = require(o.out, "out");
  AblationOptions ao;
  ao.train = train_config(o);
  ao.model = model_config(o);
  ao.eval = eval_options(o, data.config.mu_frames);
  ao.out_dir = out;
  ao.tts_items = o.tts_limit;
  ao.interactive_items = o.interactive_limit;
  ao.vanilla_checkpoint = o.vanilla_ckpt;
  ao.listener_checkpoint = o.listener_ckpt;
  const auto train = to_examples(data.train);
  const auto val = to_examples(data.val);
  if (ao.vanilla_checkpoint.empty()) {
    TrainConfig tc = ao.train;
    tc.speaking_init = tc.listening_init = InitMode::Scratch;
    auto r = pretrain_tts(tc, ao.model, train, val);
    ao.vanilla_checkpoint = (out / "vanilla.ckpt").string();
    r.model.save(ao.vanilla_checkpoint);
  }
  if (ao.listener_checkpoint.empty()) {
    TrainConfig tc = ao.train;
    tc.speaking_init = tc.listening_init = InitMode::Scratch;
    auto r = pretrain_listener(tc, ao.model, train, val);
    ao.listener_checkpoint = (out / "listener.ckpt").string();
    save_listener(r.model, ao.listener_checkpoint);
  }
  const auto rows = run_ablation(ao, data);
  write_json(out / "ablation.json", eval::ablation_json(rows));
  const auto text = eval::ablation_text(rows);
  write_text(out / "ablation.txt", text);
  write_manifest(out, "ablation",
                 {{"train", ao.train},
                  {"model", ao.model},
                  {"data", o.data},
                  {"vanilla_checkpoint", ao.vanilla_checkpoint},
                  {"listener_checkpoint", ao.listener_checkpoint},
                  {"eval", eval_options_json(ao.eval)}},
                 ao.train.seed);
  std::cout << text;
  return 0;
}

int cmd_serve(const Options& o) {
  const auto model = load_model(o);
  world::WorldConfig wc;
  if (!o.data.empty()) {
    wc = load_data(o).config;
  } else {
    wc = config_section(o, "world").get<world::WorldConfig>();
    if (!o.scenario.empty()) wc.scenario = world::parse_scenario(o.scenario);
    if (o.world_seed) wc.seed = *o.world_seed;
  }
  const world::World w(wc);
  duplexd::ServerOptions so;
  so.host = o.host;
  so.tcp_port = o.port;
  so.http_port = o.http_port;
  so.threads = o.threads.value_or(2);
  so.default_tick_ms = o.tick_ms.value_or(duplexd::kDefaultTickMs);
  so.mu_frames = wc.mu_frames;
  so.manifest = duplexd::make_manifest(w, model, so.default_tick_ms);
  duplexd::Server server(model, w.codebook(), so);
  server.run([&] {
    std::cout << "duplexd listening: ndjson tcp://" << so.host << ":" << server.tcp_port() << ", http://" << so.host
              << ":" << server.http_port() << " (/healthz, /manifest, /ws)" << std::endl;
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Listen-while-speaking language model toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersionString));
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file with world/model/train/eval sections");
    sub->add_option("--seed", o.seed, "Master seed; overrides the config file");
    sub->add_option("--out", o.out, "Output directory (default runs/<subcommand>)");
  };
  auto data_flag = [&](CLI::App* sub) { sub->add_option("--data", o.data, "Dataset directory from make-data"); };
  auto train_flags = [&](CLI::App* sub) {
    sub->add_option("--steps", o.steps, "Total optimizer steps (0 derives them from epochs)");
    sub->add_option("--epochs", o.epochs, "Epochs over the training split");
    sub->add_option("--batch-size", o.batch_size, "Minibatch size");
    sub->add_option("--warmup", o.warmup, "Warmup steps");
    sub->add_option("--eval-every", o.eval_every, "Validate every N steps (0 = once per epoch)");
    sub->add_option("--max-val", o.max_val, "Cap on validation items");
    sub->add_option("--log-every", o.log_every, "Progress output every N steps");
    sub->add_option("--fusion", o.fusion, "early | middle | late");
  };
  auto eval_flags = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
    sub->add_option("--threads", o.threads, "Evaluation worker threads");
  };

  auto* make_data = app.add_subcommand("make-data", "Generate the synthetic corpus");
  common(make_data);
  make_data->add_option("--scenario", o.scenario, "command | voice");
  make_data->add_option("--n-train", o.n_train, "Training records");
  make_data->add_option("--n-val", o.n_val, "Validation records");

  auto* pre_tts = app.add_subcommand("pretrain-tts", "Train the vanilla speaking-only model");
  common(pre_tts);
  data_flag(pre_tts);
  train_flags(pre_tts);

  auto* pre_listen = app.add_subcommand("pretrain-listener", "Pretrain the listener encoder on frame classes");
  common(pre_listen);
  data_flag(pre_listen);
  train_flags(pre_listen);

  auto* train = app.add_subcommand("train", "Train a listen-while-speaking model");
  common(train);
  data_flag(train);
  train_flags(train);
  train->add_option("--speaking-init", o.speaking_init, "scratch | frozen | finetune");
  train->add_option("--listening-init", o.listening_init, "scratch | frozen | finetune");
  train->add_option("--speaking-ckpt", o.speaking_ckpt, "Pretrained speaking checkpoint");
  train->add_option("--listening-ckpt", o.listening_ckpt, "Pretrained listener checkpoint");

  auto* eval_tts = app.add_subcommand("eval-tts", "Transcript and token error rates on the TTS test split");
  common(eval_tts);
  data_flag(eval_tts);
  eval_flags(eval_tts);
  eval_tts->add_option("--limit", o.limit, "Evaluate only the first N utterances");

  auto* eval_inter = app.add_subcommand("eval-interactive", "Interruption precision, recall and F1");
  common(eval_inter);
  data_flag(eval_inter);
  eval_flags(eval_inter);
  eval_inter->add_option("--condition", o.condition, "clean | noise");
  eval_inter->add_option("--limit", o.limit, "Evaluate N items, half interrupted");

  auto* trace = app.add_subcommand("trace-irq", "Export IRQ probability traces and statistics");
  common(trace);
  data_flag(trace);
  eval_flags(trace);
  trace->add_option("--limit", o.limit, "Trace only the first N interrupted items");

  auto* ablation = app.add_subcommand("ablation", "Train and evaluate the initialization matrix");
  common(ablation);
  data_flag(ablation);
  train_flags(ablation);
  ablation->add_option("--threads", o.threads, "Evaluation worker threads");
  ablation->add_option("--vanilla-ckpt", o.vanilla_ckpt, "Pretrained vanilla checkpoint (trained if omitted)");
  ablation->add_option("--listener-ckpt", o.listener_ckpt, "Pretrained listener checkpoint (trained if omitted)");
  ablation->add_option("--tts-limit", o.tts_limit, "TTS utterances per row");
  ablation->add_option("--interactive-limit", o.interactive_limit, "Interactive items per row");

  auto* serve = app.add_subcommand("serve", "Run the duplex session server");
  common(serve);
  data_flag(serve);
  eval_flags(serve);
  serve->add_option("--scenario", o.scenario, "World scenario when --data is not given");
  serve->add_option("--world-seed", o.world_seed, "World seed when --data is not given");
  serve->add_option("--host", o.host, "Listen address");
  serve->add_option("--port", o.port, "NDJSON TCP port");
  serve->add_option("--http-port", o.http_port, "HTTP port for /healthz, /manifest and /ws");
  serve->add_option("--tick-ms", o.tick_ms, "Default realtime tick");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (o.out.empty() && !app.get_subcommands().empty()) o.out = "runs/" + app.get_subcommands().front()->get_name();

  try {
    if (*make_data) return cmd_make_data(o);
    if (*pre_tts) return cmd_pretrain_tts(o);
    if (*pre_listen) return cmd_pretrain_listener(o);
    if (*train) return cmd_train(o);
    if (*eval_tts) return cmd_eval_tts(o);
    if (*eval_inter) return cmd_eval_interactive(o);
    if (*trace) return cmd_trace_irq(o);
    if (*ablation) return cmd_ablation(o);
    if (*serve) return cmd_serve(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
