#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "mevo/inference.hpp"
#include "mevo/tensor_store.hpp"

namespace mevo {

enum class Split { dev, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

enum class Metric { accuracy, macro_f1 };
std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

struct FitnessReport {
  double score = 0.0;
  std::string metric = "accuracy";
  std::size_t n_examples = 0;
};

struct EvaluatorInfo {
  std::string name;
  std::string version;
  std::size_t capacity = 1;  // max concurrent evaluate calls
};

/// Scores candidate weights. Implementations must be deterministic; those
/// advertising capacity > 1 must tolerate concurrent evaluate() calls.
class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual EvaluatorInfo info() const = 0;
  virtual FitnessReport evaluate(const FlatVector& weights, Split split) = 0;
};

/// Macro-averaged metric over a list of domain batches, computed with the
/// built-in MLP engine.
class InProcessEvaluator final : public Evaluator {
 public:
  InProcessEvaluator(MlpSpec spec, std::vector<Batch> dev, std::vector<Batch> test, Metric metric = Metric::accuracy);

  EvaluatorInfo info() const override;
  FitnessReport evaluate(const FlatVector& weights, Split split) override;

  const MlpSpec& spec() const { return spec_; }
  const std::vector<Batch>& batches(Split split) const { return split == Split::dev ? dev_ : test_; }

 private:
  MlpSpec spec_;
  std::vector<Batch> dev_;
  std::vector<Batch> test_;
  Metric metric_;
};

/// Adapts any callable into an Evaluator (test doubles, closures over models).
class FunctionEvaluator final : public Evaluator {
 public:
  using Fn = std::function<double(const FlatVector&, Split)>;
  FunctionEvaluator(Fn fn, EvaluatorInfo info) : fn_(std::move(fn)), info_(std::move(info)) {}
  EvaluatorInfo info() const override { return info_; }
  FitnessReport evaluate(const FlatVector& weights, Split split) override {
    return FitnessReport{fn_(weights, split), "accuracy", 0};
  }

 private:
  Fn fn_;
  EvaluatorInfo info_;
};

// ---------------------------------------------------------------------------
// Line-delimited JSON protocol over a child's stdin/stdout.

struct SessionOptions {
  std::chrono::milliseconds handshake_timeout{10'000};
  std::chrono::milliseconds evaluate_timeout{300'000};
  std::filesystem::path scratch_dir;  // defaults to the system temp directory
  /// Written into every candidate checkpoint's "__metadata__".
  std::map<std::string, std::string> checkpoint_metadata;
  /// Evaluate the first candidate twice and require identical scores.
  bool determinism_probe = true;
  double determinism_tolerance = 1e-12;
};

class ChildProcess {
 public:
  explicit ChildProcess(const std::vector<std::string>& argv);
  ~ChildProcess();
  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  void write_line(const std::string& line);
  /// Throws TimeoutError on deadline, ProtocolError on EOF.
  std::string read_line(std::chrono::milliseconds timeout);
  void close_input();
  /// Waits up to `grace` for exit, then kills. Returns the exit status if known.
  std::optional<int> terminate(std::chrono::milliseconds grace);
  int pid() const { return pid_; }

 private:
  int pid_ = -1;
  int in_fd_ = -1;   // child's stdin
  int out_fd_ = -1;  // child's stdout
  std::string buffer_;
  bool reaped_ = false;
};

/// One evaluator child process. Requests are serialized per session; any
/// protocol violation or timeout marks the session unusable.
class ExternalEvaluator final : public Evaluator {
 public:
  /// Spawns the command and performs the info handshake.
  ExternalEvaluator(std::vector<std::string> argv, SessionOptions options = {});
  ~ExternalEvaluator() override;

  EvaluatorInfo info() const override { return info_; }
  FitnessReport evaluate(const FlatVector& weights, Split split) override;
  void shutdown();
  bool usable() const { return usable_; }

 private:
  FitnessReport request_evaluate(const std::filesystem::path& path, Split split);
  std::string roundtrip(const std::string& request, std::int64_t id, std::chrono::milliseconds timeout);
  [[noreturn]] void fail(const std::string& what);

  std::vector<std::string> argv_;
  SessionOptions options_;
  std::unique_ptr<ChildProcess> child_;
  EvaluatorInfo info_;
  std::mutex mutex_;
  std::int64_t next_id_ = 1;
  bool usable_ = true;
  bool probed_ = false;
  std::uint64_t file_counter_ = 0;
};

/// Server side of the protocol: reads requests from `in`, answers on `out`,
/// returns after a shutdown request or end of input.
using EvaluateHandler =
    std::function<FitnessReport(const std::filesystem::path& weights_path, Split split, const std::string& metric)>;
void serve_protocol(std::istream& in, std::ostream& out, const EvaluatorInfo& info, const EvaluateHandler& handler);

/// Tokenizes a command string on whitespace (no shell quoting).
std::vector<std::string> split_command(const std::string& command);

}  // namespace mevo
