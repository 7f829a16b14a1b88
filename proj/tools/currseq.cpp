// currseq: prepare pools, run curriculum plans, regenerate reports and
// verify gradients from the command line.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or configuration
// error, 3 I/O error.

#include <sys/file.h>
#include <unistd.h>
#include <fcntl.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "currseq/currseq.hpp"

namespace fs = std::filesystem;
using namespace currseq;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void log_line(const std::string& line) { std::cerr << "ts=" << utc_now() << ' ' << line << std::endl; }

std::string quoted(const std::string& s) { return "\"" + s + "\""; }

// Exclusive advisory lock on <dir>/.lock, held until process exit.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    fs::create_directories(dir);
    const auto path = dir / ".lock";
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file '" + path.string() + "'");
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw IoError("'" + dir.string() + "' is locked by another process");
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }

 private:
  int fd_ = -1;
};

// Written when a command starts and finalized when it ends.
class RunManifest {
 public:
  RunManifest(fs::path path, const std::vector<std::string>& argv) : path_(std::move(path)) {
    j_["command_line"] = argv;
    j_["code_version"] = CURRSEQ_VERSION;
    j_["started"] = utc_now();
    j_["status"] = "running";
    flush();
  }

  nlohmann::json& operator[](const std::string& k) { return j_[k]; }

  void finish(const std::string& status) {
    j_["finished"] = utc_now();
    j_["status"] = status;
    flush();
  }

 private:
  void flush() { write_text_file(path_, j_.dump(2) + "\n"); }
  fs::path path_;
  nlohmann::json j_;
};

std::vector<std::string> g_argv;

int cmd_synth(const std::string& out, const synthetic::GrammarConfig& cfg) {
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + out + "' for writing");
  synthetic::write_corpus(f, cfg);
  if (!f) throw IoError("write failed for '" + out + "'");
  log_line("event=synth_done out=" + quoted(out) + " conversations=" + std::to_string(cfg.conversations));
  return kExitOk;
}

int cmd_prepare(const std::string& corpus, const fs::path& out, std::uint64_t seed, std::size_t vocab_size,
                std::size_t min_freq) {
  DirLock lock(out);
  RunManifest manifest(out / "prepare_manifest.json", g_argv);
  std::ifstream in(corpus, std::ios::binary);
  if (!in) throw IoError("cannot open corpus '" + corpus + "'");
  const auto digest = sha256_file(corpus);
  manifest["corpus_digest"] = digest;
  log_line("event=prepare_start corpus=" + quoted(corpus));

  auto pools = build_pools(in, fs::path(corpus).filename().string(), digest);
  for (auto* p : {&pools.length[0], &pools.length[1], &pools.length[2], &pools.cross}) p->manifest.seed = seed;
  const auto vocab = build_vocab(pools.cross.pairs, vocab_size, min_freq);

  std::vector<std::string> outputs;
  for (const auto* p : {&pools.length[0], &pools.length[1], &pools.length[2], &pools.cross}) {
    const auto path = out / pool_file_name(p->label);
    write_pool(path, *p);
    outputs.push_back(path.string());
  }
  write_vocab(out / kVocabFileName, vocab);
  write_text_file(out / "counts.json", to_json(pools.counts).dump(2) + "\n");
  outputs.push_back((out / kVocabFileName).string());
  outputs.push_back((out / "counts.json").string());

  const auto& c = pools.counts;
  manifest["outputs"] = outputs;
  manifest["counts"] = to_json(c);
  manifest["vocab_digest"] = vocab.digest();
  manifest.finish("ok");
  log_line("event=prepare_done short=" + std::to_string(c.short_pairs) + " medium=" + std::to_string(c.medium_pairs) +
           " long=" + std::to_string(c.long_pairs) + " cross=" + std::to_string(c.cross_total()) +
           " discarded=" + std::to_string(c.discarded) + " vocab=" + std::to_string(vocab.size()));
  return kExitOk;
}

CurriculumPlan stored_plan(const fs::path& out) {
  const auto path = out / kPlanFileName;
  if (!fs::exists(path)) throw IoError("no experiment in '" + out.string() + "' (missing " + kPlanFileName + ")");
  return plan_from_json(nlohmann::json::parse(read_text_file(path)));
}

std::map<std::string, std::string> stored_digests(const fs::path& out) {
  const auto path = out / "data_digests.json";
  if (!fs::exists(path)) return {};
  return nlohmann::json::parse(read_text_file(path)).get<std::map<std::string, std::string>>();
}

std::vector<RunRecord> stored_records(const fs::path& out) {
  if (!fs::exists(out / LineageStore::kFileName)) return {};
  return LineageStore(out).records();
}

int cmd_run(const std::string& plan_path, const fs::path& out, std::optional<std::uint64_t> seed,
            std::optional<std::size_t> workers, std::optional<std::string> data_dir, bool resume) {
  auto plan = load_plan(plan_path);
  if (seed) plan.master_seed = *seed;
  if (workers) plan.workers = *workers;
  if (data_dir) plan.data = *data_dir;
  if (plan.data.empty()) throw ConfigError("data", "no data directory given in the plan or with --data");
  plan.validate();

  DirLock lock(out);
  if (!resume && fs::exists(out / LineageStore::kFileName)) {
    throw ConfigError("resume", "'" + out.string() + "' already holds runs; pass --resume or use a new --out");
  }
  RunManifest manifest(out / "run_manifest.json", g_argv);
  manifest["plan_digest"] = plan_digest(plan);
  log_line("event=run_start plan=" + quoted(plan_path) + " out=" + quoted(out.string()) +
           " plan_digest=" + plan_digest(plan).substr(0, 12) + " workers=" + std::to_string(plan.workers));

  auto data = prepare_data(plan, load_inputs(plan.data, plan));
  manifest["corpus_digests"] = data.digests;
  write_text_file(out / "data_digests.json", nlohmann::json(data.digests).dump(2) + "\n");
  log_line("event=data_ready vocab=" + std::to_string(data.vocab.size()) +
           " params=" + std::to_string(data.model.parameter_count()));

  run_plan(plan, data, out, {plan.workers, log_line});
  const auto files = write_report(plan, LineageStore(out).records(), out, data.digests);
  manifest["outputs"] = {files.table1.string(), files.table2.string(), files.directional.string(),
                         files.manifest.string()};
  manifest.finish("ok");
  log_line("event=run_done report=" + quoted(files.table2.string()));
  return kExitOk;
}

int cmd_report(const fs::path& out) {
  const auto plan = stored_plan(out);
  DirLock lock(out);
  const auto records = stored_records(out);
  const auto files = write_report(plan, records, out, stored_digests(out));
  log_line("event=report_done runs=" + std::to_string(records.size()) + " table1=" + quoted(files.table1.string()) +
           " table2=" + quoted(files.table2.string()));
  std::cout << read_text_file(files.table2);
  return kExitOk;
}

int cmd_gradcheck(double corrupt, double tolerance) {
  GradCheckOptions opt;
  opt.corrupt = corrupt;
  const auto res = run_gradcheck(opt);
  char buf[160];
  std::snprintf(buf, sizeof buf, "max_relative_error=%.3e coordinates=%zu tolerance=%.1e", res.max_relative_error,
                res.coordinates, tolerance);
  std::cout << buf;
  if (res.passed(tolerance)) {
    std::cout << " result=pass\n";
    return kExitOk;
  }
  std::snprintf(buf, sizeof buf, " result=fail worst=%s[%zu] analytic=%.6e numeric=%.6e\n",
                res.worst_slot.c_str(), res.worst_index, res.worst_analytic,
                res.worst_numeric);
  std::cout << buf;
  return kExitVerify;
}

int cmd_decode(const fs::path& checkpoint, const fs::path& vocab_path, const std::string& text, bool reverse,
               std::size_t max_len) {
  const auto c = load_checkpoint(checkpoint);
  const auto vocab = read_vocab(vocab_path);
  if (vocab.size() != c.model.vocab_size) {
    throw ConfigError("vocab", "vocabulary has " + std::to_string(vocab.size()) + " entries, checkpoint expects " +
                                   std::to_string(c.model.vocab_size));
  }
  const auto source = encode_source(Utterance::from_line(text), vocab, reverse);
  const auto ids = greedy_decode(c.params, std::span<const TokenId>(source), max_len);
  std::string line;
  for (auto id : ids) {
    if (id == kEos) break;
    if (!line.empty()) line += ' ';
    line += vocab.token(id);
  }
  std::cout << line << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  g_argv.assign(argv, argv + argc);
  CLI::App app{"Sentence-length curriculum learning for next-utterance prediction"};
  app.set_version_flag("--version", std::string(CURRSEQ_VERSION));
  app.require_subcommand(1);

  // synth
  synthetic::GrammarConfig grammar;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic grammar dialogue corpus");
  synth->add_option("--out", synth_out, "Output corpus file")->required()->envname("CURRSEQ_OUT");
  synth->add_option("--conversations", grammar.conversations, "Number of conversations")->capture_default_str();
  synth->add_option("--seed", grammar.seed, "Generator seed")->capture_default_str()->envname("CURRSEQ_SEED");

  // prepare
  std::string corpus, prepare_out;
  std::uint64_t prepare_seed = 0;
  std::size_t vocab_size = 4000, min_freq = 1;
  auto* prepare = app.add_subcommand("prepare", "Extract pairs and write length, cross pools and vocabulary");
  prepare->add_option("--corpus", corpus, "Dialogue text corpus")->required()->envname("CURRSEQ_CORPUS");
  prepare->add_option("--out", prepare_out, "Output data directory")->required()->envname("CURRSEQ_OUT");
  prepare->add_option("--seed", prepare_seed, "Seed recorded in pool manifests")->envname("CURRSEQ_SEED");
  prepare->add_option("--vocab-size", vocab_size, "Vocabulary size including reserved tokens")->capture_default_str();
  prepare->add_option("--min-freq", min_freq, "Minimum word frequency")->capture_default_str();

  // run
  std::string plan_path, run_out;
  std::optional<std::uint64_t> run_seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> data_dir;
  bool resume = true;
  auto* run = app.add_subcommand("run", "Execute a curriculum plan (resumes from a partial out dir)");
  run->add_option("--plan", plan_path, "Plan file (JSON)")->required()->envname("CURRSEQ_PLAN");
  run->add_option("--out", run_out, "Experiment directory")->required()->envname("CURRSEQ_OUT");
  run->add_option("--seed", run_seed, "Override the plan's master_seed")->envname("CURRSEQ_SEED");
  run->add_option("--workers", workers, "Parallel training runs")->envname("CURRSEQ_WORKERS");
  run->add_option("--data", data_dir, "Override the plan's data directory")->envname("CURRSEQ_DATA");
  run->add_flag("--resume,!--no-resume", resume, "Resume from runs already recorded in --out")
      ->envname("CURRSEQ_RESUME");

  // report
  std::string report_out;
  auto* report = app.add_subcommand("report", "Regenerate the CSV tables from a finished or partial experiment");
  report->add_option("--out", report_out, "Experiment directory")->required()->envname("CURRSEQ_OUT");

  // gradcheck
  double corrupt = 0.0, tolerance = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  gradcheck->add_option("--corrupt", corrupt, "Add this to one analytic gradient coordinate (checker self-test)");
  gradcheck->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();

  // decode
  std::string checkpoint, vocab_path, text;
  bool reverse = false;
  std::size_t max_len = kMaxTargetIds;
  auto* decode_cmd = app.add_subcommand("decode", "Greedy-decode a reply from a checkpoint");
  decode_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  decode_cmd->add_option("--vocab", vocab_path, "Vocabulary file")->required();
  decode_cmd->add_option("--text", text, "Source utterance")->required();
  decode_cmd->add_flag("--reverse-source", reverse, "Reverse the source as the plan's trainer did");
  decode_cmd->add_option("--max-len", max_len, "Maximum generated ids")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(synth_out, grammar);
    if (*prepare) return cmd_prepare(corpus, prepare_out, prepare_seed, vocab_size, min_freq);
    if (*run) return cmd_run(plan_path, run_out, run_seed, workers, data_dir, resume);
    if (*report) return cmd_report(report_out);
    if (*gradcheck) return cmd_gradcheck(corrupt, tolerance);
    if (*decode_cmd) return cmd_decode(checkpoint, vocab_path, text, reverse, max_len);
  } catch (const ConfigError& e) {
    log_line("level=error kind=config key=" + quoted(e.key()) + " msg=" + quoted(e.what()));
    return kExitConfig;
  } catch (const InsufficientPairs& e) {
    log_line("level=error kind=data msg=" + quoted(e.what()));
    return kExitConfig;
  } catch (const IoError& e) {
    log_line("level=error kind=io msg=" + quoted(e.what()));
    return kExitIo;
  } catch (const CorpusDecodeError& e) {
    log_line("level=error kind=decode line=" + std::to_string(e.line()) + " msg=" + quoted(e.what()));
    return kExitIo;
  } catch (const FormatError& e) {
    log_line("level=error kind=format msg=" + quoted(e.what()));
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    log_line("level=error kind=io msg=" + quoted(e.what()));
    return kExitIo;
  } catch (const nlohmann::json::exception& e) {
    log_line("level=error kind=format msg=" + quoted(e.what()));
    return kExitIo;
  } catch (const std::exception& e) {
    log_line("level=error kind=failure msg=" + quoted(e.what()));
    return kExitVerify;
  }
  return kExitConfig;
}
