#include "mevo/evaluator.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "mevo/error.hpp"

extern char** environ;

namespace mevo {

using ojson = nlohmann::ordered_json;

std::string to_string(Split s) { return s == Split::dev ? "dev" : "test"; }

Split split_from_string(const std::string& s) {
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  throw InvalidArgument("unknown split '" + s + "'");
}

std::string to_string(Metric m) { return m == Metric::accuracy ? "accuracy" : "macro_f1"; }

Metric metric_from_string(const std::string& s) {
  if (s == "accuracy") return Metric::accuracy;
  if (s == "macro_f1") return Metric::macro_f1;
  throw InvalidArgument("unknown metric '" + s + "'");
}

// ---------------------------------------------------------------------------

InProcessEvaluator::InProcessEvaluator(MlpSpec spec, std::vector<Batch> dev, std::vector<Batch> test, Metric metric)
    : spec_(std::move(spec)), dev_(std::move(dev)), test_(std::move(test)), metric_(metric) {
  spec_.validate();
}

EvaluatorInfo InProcessEvaluator::info() const {
  return EvaluatorInfo{"mevo-inprocess", "1.0", std::max(1u, std::thread::hardware_concurrency())};
}

FitnessReport InProcessEvaluator::evaluate(const FlatVector& weights, Split split) {
  const auto& batches = split == Split::dev ? dev_ : test_;
  if (batches.empty()) throw InvalidArgument("no " + to_string(split) + " data configured");
  double total = 0.0;
  std::size_t n = 0;
  for (const Batch& b : batches) {
    total += metric_ == Metric::accuracy ? accuracy(spec_, weights, b) : macro_f1(spec_, weights, b);
    n += b.size();
  }
  return FitnessReport{total / static_cast<double>(batches.size()), to_string(metric_), n};
}

// ---------------------------------------------------------------------------
// Child process

namespace {

void ignore_sigpipe() {
  static const bool done = [] {
    struct sigaction sa {};
    sa.sa_handler = SIG_IGN;
    sigaction(SIGPIPE, &sa, nullptr);
    return true;
  }();
  (void)done;
}

}  // namespace

ChildProcess::ChildProcess(const std::vector<std::string>& argv) {
  if (argv.empty()) throw InvalidArgument("empty evaluator command");
  ignore_sigpipe();
  int to_child[2], from_child[2];
  if (pipe2(to_child, O_CLOEXEC) != 0) throw IoError("pipe failed");
  if (pipe2(from_child, O_CLOEXEC) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw IoError("pipe failed");
  }
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, to_child[0], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, from_child[1], STDOUT_FILENO);

  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  pid_t pid = -1;
  const int rc = posix_spawnp(&pid, args[0], &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  ::close(to_child[0]);
  ::close(from_child[1]);
  if (rc != 0) {
    ::close(to_child[1]);
    ::close(from_child[0]);
    throw IoError("failed to spawn '" + argv[0] + "': " + std::strerror(rc));
  }
  pid_ = pid;
  in_fd_ = to_child[1];
  out_fd_ = from_child[0];
}

ChildProcess::~ChildProcess() { terminate(std::chrono::milliseconds(200)); }

void ChildProcess::write_line(const std::string& line) {
  std::string data = line + "\n";
  std::size_t written = 0;
  while (written < data.size()) {
    const ssize_t n = ::write(in_fd_, data.data() + written, data.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("write to evaluator failed: ") + std::strerror(errno));
    }
    written += static_cast<std::size_t>(n);
  }
}

std::string ChildProcess::read_line(std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    if (auto pos = buffer_.find('\n'); pos != std::string::npos) {
      std::string line = buffer_.substr(0, pos);
      buffer_.erase(0, pos + 1);
      return line;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) throw TimeoutError("evaluator did not answer within " + std::to_string(timeout.count()) + " ms");
    pollfd pfd{out_fd_, POLLIN, 0};
    const int rc = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw IoError(std::string("poll failed: ") + std::strerror(errno));
    }
    if (rc == 0) continue;
    char chunk[4096];
    const ssize_t n = ::read(out_fd_, chunk, sizeof(chunk));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("read from evaluator failed: ") + std::strerror(errno));
    }
    if (n == 0) throw ProtocolError("evaluator closed its output");
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

void ChildProcess::close_input() {
  if (in_fd_ >= 0) {
    ::close(in_fd_);
    in_fd_ = -1;
  }
}

std::optional<int> ChildProcess::terminate(std::chrono::milliseconds grace) {
  close_input();
  std::optional<int> status;
  if (pid_ > 0 && !reaped_) {
    const auto deadline = std::chrono::steady_clock::now() + grace;
    int st = 0;
    for (;;) {
      const pid_t r = ::waitpid(pid_, &st, WNOHANG);
      if (r == pid_) {
        reaped_ = true;
        status = st;
        break;
      }
      if (r < 0 || std::chrono::steady_clock::now() >= deadline) break;
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    if (!reaped_) {
      ::kill(pid_, SIGKILL);
      if (::waitpid(pid_, &st, 0) == pid_) status = st;
      reaped_ = true;
    }
  }
  if (out_fd_ >= 0) {
    ::close(out_fd_);
    out_fd_ = -1;
  }
  return status;
}

// ---------------------------------------------------------------------------
// External session

ExternalEvaluator::ExternalEvaluator(std::vector<std::string> argv, SessionOptions options)
    : argv_(std::move(argv)), options_(std::move(options)) {
  if (options_.scratch_dir.empty()) options_.scratch_dir = std::filesystem::temp_directory_path();
  try {
    child_ = std::make_unique<ChildProcess>(argv_);
  } catch (const Error& e) {
    throw ProtocolError(std::string("spawn failure: ") + e.what());
  }
  const std::int64_t id = next_id_++;
  ojson req = {{"id", id}, {"cmd", "info"}};
  std::string line;
  try {
    line = roundtrip(req.dump(), id, options_.handshake_timeout);
  } catch (const Error& e) {
    throw ProtocolError(std::string("handshake failure: ") + e.what());
  }
  const auto resp = ojson::parse(line);
  if (!resp.value("ok", false)) fail("handshake rejected: " + resp.value("error", std::string("no reason given")));
  try {
    info_.name = resp.at("name").get<std::string>();
    info_.version = resp.at("version").get<std::string>();
    const auto cap = resp.at("capacity").get<std::int64_t>();
    if (cap < 1) fail("handshake advertised capacity < 1");
    info_.capacity = static_cast<std::size_t>(cap);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("handshake response malformed: ") + e.what());
  }
}

ExternalEvaluator::~ExternalEvaluator() {
  try {
    shutdown();
  } catch (...) {
  }
}

void ExternalEvaluator::fail(const std::string& what) {
  usable_ = false;
  if (child_) child_->terminate(std::chrono::milliseconds(0));
  throw ProtocolError("protocol violation: " + what);
}

// Sends one request and returns the validated raw response line.
std::string ExternalEvaluator::roundtrip(const std::string& request, std::int64_t id,
                                         std::chrono::milliseconds timeout) {
  if (!usable_) throw ProtocolError("evaluator session is unusable after an earlier failure");
  std::string line;
  try {
    child_->write_line(request);
    line = child_->read_line(timeout);
  } catch (const TimeoutError&) {
    usable_ = false;
    child_->terminate(std::chrono::milliseconds(0));
    throw;
  } catch (const Error& e) {
    fail(e.what());
  }
  ojson resp;
  try {
    resp = ojson::parse(line);
  } catch (const nlohmann::json::exception&) {
    fail("malformed response line: " + line.substr(0, 200));
  }
  if (!resp.is_object()) fail("response is not a JSON object");
  if (!resp.contains("id") || !resp["id"].is_number_integer() || resp["id"].get<std::int64_t>() != id) {
    fail("response id does not match request " + std::to_string(id));
  }
  if (!resp.contains("ok") || !resp["ok"].is_boolean()) fail("response lacks boolean 'ok'");
  return line;
}

FitnessReport ExternalEvaluator::request_evaluate(const std::filesystem::path& path, Split split) {
  const std::int64_t id = next_id_++;
  ojson req = {{"id", id}, {"cmd", "evaluate"}, {"weights_path", path.string()}, {"split", to_string(split)},
               {"metric", "accuracy"}};
  const auto resp = ojson::parse(roundtrip(req.dump(), id, options_.evaluate_timeout));
  if (!resp["ok"].get<bool>()) {
    if (resp.contains("score")) fail("failed response carries a score");
    throw Error("evaluator reported an error: " + resp.value("error", std::string("unspecified")));
  }
  if (!resp.contains("score") || !resp["score"].is_number()) fail("successful response lacks a numeric score");
  FitnessReport report;
  report.score = resp["score"].get<double>();
  if (!(report.score >= 0.0 && report.score <= 1.0)) {
    fail("score out of range: " + resp["score"].dump());
  }
  report.metric = resp.value("metric", std::string("accuracy"));
  if (resp.contains("n_examples")) {
    if (!resp["n_examples"].is_number_integer()) fail("n_examples is not an integer");
    report.n_examples = resp["n_examples"].get<std::size_t>();
  }
  return report;
}

FitnessReport ExternalEvaluator::evaluate(const FlatVector& weights, Split split) {
  std::lock_guard lock(mutex_);
  if (!usable_) throw ProtocolError("evaluator session is unusable after an earlier failure");
  TensorMap map = unflatten(weights);
  map.metadata() = options_.checkpoint_metadata;
  const auto path = options_.scratch_dir / ("mevo-" + std::to_string(::getpid()) + "-" +
                                            std::to_string(child_->pid()) + "-" + std::to_string(file_counter_++) +
                                            ".safetensors");
  save_checkpoint(map, path);
  struct Cleanup {
    std::filesystem::path p;
    ~Cleanup() {
      std::error_code ec;
      std::filesystem::remove(p, ec);
    }
  } cleanup{path};

  FitnessReport report = request_evaluate(path, split);
  if (options_.determinism_probe && !probed_) {
    const FitnessReport again = request_evaluate(path, split);
    if (std::abs(again.score - report.score) > options_.determinism_tolerance) {
      fail("evaluator is not deterministic (" + std::to_string(report.score) + " vs " + std::to_string(again.score) + ")");
    }
    probed_ = true;
  }
  return report;
}

void ExternalEvaluator::shutdown() {
  std::lock_guard lock(mutex_);
  if (!child_) return;
  if (usable_) {
    const std::int64_t id = next_id_++;
    try {
      roundtrip(ojson({{"id", id}, {"cmd", "shutdown"}}).dump(), id, options_.handshake_timeout);
    } catch (const Error&) {
    }
  }
  usable_ = false;
  child_->terminate(std::chrono::milliseconds(1000));
  child_.reset();
}

// ---------------------------------------------------------------------------
// Server loop

void serve_protocol(std::istream& in, std::ostream& out, const EvaluatorInfo& info, const EvaluateHandler& handler) {
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ojson resp;
    ojson req;
    try {
      req = ojson::parse(line);
    } catch (const nlohmann::json::exception& e) {
      out << ojson({{"id", nullptr}, {"ok", false}, {"error", std::string("malformed request: ") + e.what()}}).dump()
          << "\n" << std::flush;
      continue;
    }
    const ojson id = req.contains("id") ? req["id"] : ojson(nullptr);
    const std::string cmd = req.contains("cmd") && req["cmd"].is_string() ? req["cmd"].get<std::string>() : "";
    bool stop = false;
    try {
      if (cmd == "info") {
        resp = {{"id", id}, {"ok", true}, {"name", info.name}, {"version", info.version}, {"capacity", info.capacity}};
      } else if (cmd == "evaluate") {
        const auto path = req.at("weights_path").get<std::string>();
        const Split split = split_from_string(req.value("split", std::string("dev")));
        const std::string metric = req.value("metric", std::string("accuracy"));
        const FitnessReport r = handler(path, split, metric);
        resp = {{"id", id}, {"ok", true}, {"score", r.score}, {"metric", r.metric}, {"n_examples", r.n_examples}};
      } else if (cmd == "shutdown") {
        resp = {{"id", id}, {"ok", true}};
        stop = true;
      } else {
        resp = {{"id", id}, {"ok", false}, {"error", "unknown command '" + cmd + "'"}};
      }
    } catch (const std::exception& e) {
      resp = {{"id", id}, {"ok", false}, {"error", e.what()}};
    }
    out << resp.dump() << "\n" << std::flush;
    if (stop) return;
  }
}

std::vector<std::string> split_command(const std::string& command) {
  std::istringstream ss(command);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

}  // namespace mevo
