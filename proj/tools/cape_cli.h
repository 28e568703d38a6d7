// Copyright 2026 The Cape Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef CAPE_TOOLS_CAPE_CLI_H_
#define CAPE_TOOLS_CAPE_CLI_H_

// `cape` command-line front end: setup, perturb, attack, evaluate, dp-check
// and serve-check.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 provider error,
// 3 a prompt failed and --skip-errors was not given, 4 the privacy check
// found a violation.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "cape/artifact.h"
#include "cape/attacks.h"
#include "cape/file_provider.h"
#include "cape/http_provider.h"
#include "cape/internal/io.h"
#include "cape/internal/parallel.h"
#include "cape/mechanism.h"
#include "cape/metrics.h"
#include "cape/nonsensitive_defaults.h"
#include "cape/random.h"
#include "cape/sampler.h"
#include "cape/vocab.h"
#include "json.hpp"

namespace cape::cli {

enum ExitCode {
  kOk = 0,
  kConfigError = 1,
  kProviderError = 2,
  kPartialFailure = 3,
  kPrivacyViolation = 4,
};

inline constexpr char kProviderUrlEnv[] = "CAPE_PROVIDER_URL";

namespace detail {

using Clock = std::chrono::steady_clock;

inline double SecondsSince(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Failure {
  int code;
  absl::Status status;
};

inline int Report(std::ostream& err, int code, const absl::Status& status) {
  err << "error: " << status.message() << "\n";
  return code;
}

inline int CodeFor(const absl::Status& status, int fallback) {
  return IsProviderError(status) ? kProviderError : fallback;
}

// "file:DIR", "http(s)://...", or a directory path. Empty falls back to
// $CAPE_PROVIDER_URL.
inline absl::StatusOr<std::unique_ptr<Provider>> OpenProvider(
    std::string spec, const Vocabulary& vocab) {
  if (spec.empty()) {
    if (const char* env = std::getenv(kProviderUrlEnv)) spec = env;
  }
  if (spec.empty()) {
    return absl::InvalidArgumentError(internal::StrCat(
        "no provider given (use --provider or set ", kProviderUrlEnv, ")"));
  }
  // Every failure past this point, binding mismatches included, is a
  // provider error.
  if (spec.starts_with("http://") || spec.starts_with("https://")) {
    absl::StatusOr<std::unique_ptr<HttpProvider>> http =
        HttpProvider::Connect(spec, vocab);
    if (!http.ok()) return MarkProviderError(http.status());
    return std::unique_ptr<Provider>(std::move(*http));
  }
  if (spec.starts_with("file:")) spec = spec.substr(5);
  absl::StatusOr<FileProvider> file = FileProvider::Open(spec, vocab);
  if (!file.ok()) return MarkProviderError(file.status());
  return std::unique_ptr<Provider>(
      std::make_unique<FileProvider>(*std::move(file)));
}

inline nlohmann::json DescribeProvider(const Provider& provider) {
  const ProviderDescriptor& d = provider.descriptor();
  std::string kind = d.kind == ProviderKind::kFile   ? "file"
                     : d.kind == ProviderKind::kHttp ? "http"
                                                     : "in-memory";
  return {{"kind", kind},
          {"model", d.model_name},
          {"mode", ContextModeName(d.mode)},
          {"vocab_size", d.vocab_size},
          {"vocab_sha256", d.vocabulary_hash}};
}

// Embeddings from a file when given, otherwise from the provider.
inline absl::StatusOr<EmbeddingTable> LoadTable(const std::string& path,
                                                const Vocabulary& vocab,
                                                Provider* provider) {
  if (!path.empty()) return LoadEmbeddings(path, vocab);
  if (provider == nullptr) {
    return absl::InvalidArgumentError("--embeddings is required");
  }
  return provider->FetchEmbeddingTable();
}

inline absl::Status WriteManifest(const std::filesystem::path& output,
                                  nlohmann::json manifest) {
  std::filesystem::path path = output;
  path += ".manifest.json";
  return internal::WriteFileAtomically(path, manifest.dump(2) + "\n");
}

// Config file: either a bare config object or a run manifest holding one
// under "config".
inline absl::Status MergeConfigFile(const std::string& path,
                                    MechanismConfig& config) {
  absl::StatusOr<std::string> text = internal::ReadFile(path);
  if (!text.ok()) return text.status();
  nlohmann::json j = nlohmann::json::parse(*text, nullptr, false);
  if (j.is_discarded()) {
    return absl::InvalidArgumentError(
        internal::StrCat(path, ": malformed JSON"));
  }
  if (j.contains("config") && j["config"].is_object()) j = j["config"];
  return config.MergeJson(j);
}

inline uint64_t FreshSeed() {
  std::random_device rd;
  return (static_cast<uint64_t>(rd()) << 32) ^ rd();
}

inline absl::StatusOr<Vocabulary> RequireVocabulary(const std::string& path) {
  if (path.empty()) return absl::InvalidArgumentError("--vocab is required");
  return LoadVocabulary(path);
}

}  // namespace detail

struct SetupFlags {
  std::string vocab;
  std::string embeddings;
  std::string provider;
  std::string cache_dir;
  std::string calibration_input;
  int calibration_samples = 16;
  std::string mode = "bidirectional";
  bool precompute = false;
};

// Optional full distance precomputation and clip-bound calibration into
// `cache_dir`. Reuses a distance matrix computed for the same vocabulary.
inline int RunSetup(const SetupFlags& flags, std::ostream& out,
                    std::ostream& err) {
  const auto start = detail::Clock::now();
  if (flags.cache_dir.empty()) {
    return detail::Report(err, kConfigError,
                          absl::InvalidArgumentError("--cache-dir is required"));
  }
  absl::StatusOr<Vocabulary> vocab = detail::RequireVocabulary(flags.vocab);
  if (!vocab.ok()) return detail::Report(err, kConfigError, vocab.status());

  std::unique_ptr<Provider> provider;
  if (!flags.calibration_input.empty() || flags.embeddings.empty()) {
    absl::StatusOr<std::unique_ptr<Provider>> p =
        detail::OpenProvider(flags.provider, *vocab);
    if (!p.ok()) {
      return detail::Report(err, detail::CodeFor(p.status(), kConfigError),
                            p.status());
    }
    provider = *std::move(p);
  }
  absl::StatusOr<EmbeddingTable> table =
      detail::LoadTable(flags.embeddings, *vocab, provider.get());
  if (!table.ok()) {
    return detail::Report(err, detail::CodeFor(table.status(), kConfigError),
                          table.status());
  }

  const std::filesystem::path dir = flags.cache_dir;
  nlohmann::json outputs = nlohmann::json::array();
  DistanceCache cache(*table);
  if (flags.precompute) {
    const std::filesystem::path matrix = dir / "distances.bin";
    absl::StatusOr<std::string> existing = internal::ReadFile(matrix);
    if (existing.ok() && LoadDistanceMatrix(*existing, *vocab, cache).ok()) {
      out << "reusing cached distance matrix " << matrix.string() << " ("
          << cache.cached_rows() << " rows)\n";
    } else {
      internal::ParallelFor(vocab->size(), internal::DefaultJobs(),
                            [&](size_t i) {
                              (void)cache.Row(static_cast<TokenId>(i));
                            });
      if (absl::Status s = internal::WriteFileAtomically(
              matrix, EncodeDistanceMatrix(cache, *vocab));
          !s.ok()) {
        return detail::Report(err, kConfigError, s);
      }
      out << "wrote distance matrix " << matrix.string() << " ("
          << vocab->size() << " rows)\n";
    }
    outputs.push_back(matrix.string());
  }

  if (!flags.calibration_input.empty()) {
    MechanismConfig config;
    config.epsilon = 1.0;
    config.calibration_samples = flags.calibration_samples;
    absl::StatusOr<ContextMode> mode = ParseContextMode(flags.mode);
    if (!mode.ok()) return detail::Report(err, kConfigError, mode.status());
    config.mode = *mode;
    NonSensitiveLoadResult nonsensitive = DefaultNonSensitive(*vocab);
    MechanismContext ctx{&*vocab, &cache, &nonsensitive.set, provider.get()};
    absl::StatusOr<std::vector<CorpusPrompt>> prompts =
        ReadCorpus(flags.calibration_input, *provider);
    if (!prompts.ok()) {
      return detail::Report(err, detail::CodeFor(prompts.status(), kConfigError),
                            prompts.status());
    }
    absl::StatusOr<ClipBound> bound = ResolveClipBound(ctx, config, *prompts);
    if (!bound.ok()) {
      return detail::Report(err, detail::CodeFor(bound.status(), kConfigError),
                            bound.status());
    }
    const std::filesystem::path calibration = dir / "calibration.json";
    nlohmann::json j = {{"clip_bound", bound->value()},
                        {"calibration_samples", flags.calibration_samples},
                        {"vocab_sha256", vocab->Sha256()}};
    if (absl::Status s =
            internal::WriteFileAtomically(calibration, j.dump(2) + "\n");
        !s.ok()) {
      return detail::Report(err, kConfigError, s);
    }
    out << "clip bound " << bound->value() << " written to "
        << calibration.string() << "\n";
    outputs.push_back(calibration.string());
  }

  const double seconds = detail::SecondsSince(start);
  out << "setup finished in " << seconds << " s\n";
  nlohmann::json manifest = {
      {"command", "setup"},
      {"inputs",
       {{"vocab", flags.vocab},
        {"embeddings", flags.embeddings},
        {"calibration_input", flags.calibration_input}}},
      {"outputs", outputs},
      {"vocab_sha256", vocab->Sha256()},
      {"timing", {{"total_seconds", seconds}}}};
  if (provider) manifest["provider"] = detail::DescribeProvider(*provider);
  if (absl::Status s = detail::WriteManifest(dir / "setup", manifest);
      !s.ok()) {
    return detail::Report(err, kConfigError, s);
  }
  return kOk;
}

struct PerturbFlags {
  std::string input;
  std::string output;
  std::string vocab;
  std::string embeddings;
  std::string provider;
  std::string nonsensitive;
  std::string config_file;
  std::string cache_dir;
  std::string record_dir;
  std::optional<double> epsilon;
  std::optional<double> lambda_l;
  std::optional<double> lambda_d;
  std::optional<int> buckets;
  std::optional<uint64_t> seed;
  std::optional<double> clip_bound;
  std::optional<int> calibration_samples;
  std::optional<std::string> mode;
  std::optional<std::string> sampler;
  std::optional<std::string> policy;
  bool skip_errors = false;
  int jobs = 0;
};

// Flags > config file > cache-dir calibration > built-in defaults.
inline absl::StatusOr<MechanismConfig> ResolveConfig(const PerturbFlags& f) {
  MechanismConfig config;
  bool seed_given = false;
  if (!f.cache_dir.empty()) {
    absl::StatusOr<std::string> text = internal::ReadFile(
        std::filesystem::path(f.cache_dir) / "calibration.json");
    if (text.ok()) {
      nlohmann::json j = nlohmann::json::parse(*text, nullptr, false);
      if (!j.is_discarded() && j.contains("clip_bound")) {
        config.clip_bound = j["clip_bound"].get<double>();
      }
    }
  }
  if (!f.config_file.empty()) {
    if (absl::Status s = detail::MergeConfigFile(f.config_file, config);
        !s.ok()) {
      return s;
    }
    absl::StatusOr<std::string> text = internal::ReadFile(f.config_file);
    nlohmann::json j = nlohmann::json::parse(*text, nullptr, false);
    if (j.contains("config")) j = j["config"];
    seed_given = j.contains("seed");
  }
  nlohmann::json overrides = nlohmann::json::object();
  if (f.epsilon) overrides["epsilon"] = *f.epsilon;
  if (f.lambda_l) overrides["lambda_l"] = *f.lambda_l;
  if (f.lambda_d) overrides["lambda_d"] = *f.lambda_d;
  if (f.buckets) overrides["n_buckets"] = *f.buckets;
  if (f.seed) overrides["seed"] = *f.seed;
  if (f.clip_bound) overrides["clip_bound"] = *f.clip_bound;
  if (f.calibration_samples) {
    overrides["calibration_samples"] = *f.calibration_samples;
  }
  if (f.mode) overrides["mode"] = *f.mode;
  if (f.sampler) overrides["sampler"] = *f.sampler;
  if (f.policy) overrides["nonsensitive_policy"] = *f.policy;
  if (absl::Status s = config.MergeJson(overrides); !s.ok()) return s;
  if (!f.seed && !seed_given) config.seed = detail::FreshSeed();
  if (absl::Status s = config.Validate(); !s.ok()) return s;
  return config;
}

inline int RunPerturb(const PerturbFlags& flags, std::ostream& out,
                      std::ostream& err) {
  const auto start = detail::Clock::now();
  if (flags.input.empty() || flags.output.empty()) {
    return detail::Report(
        err, kConfigError,
        absl::InvalidArgumentError("--input and --output are required"));
  }
  absl::StatusOr<MechanismConfig> config = ResolveConfig(flags);
  if (!config.ok()) return detail::Report(err, kConfigError, config.status());
  absl::StatusOr<Vocabulary> vocab = detail::RequireVocabulary(flags.vocab);
  if (!vocab.ok()) return detail::Report(err, kConfigError, vocab.status());

  absl::StatusOr<std::unique_ptr<Provider>> opened =
      detail::OpenProvider(flags.provider, *vocab);
  if (!opened.ok()) {
    return detail::Report(err, detail::CodeFor(opened.status(), kConfigError),
                          opened.status());
  }
  if ((*opened)->descriptor().mode != config->mode) {
    return detail::Report(
        err, kConfigError,
        absl::InvalidArgumentError(internal::StrCat(
            "provider serves ", ContextModeName((*opened)->descriptor().mode),
            " contexts but --mode is ", ContextModeName(config->mode))));
  }
  std::unique_ptr<FileProviderWriter> writer;
  std::unique_ptr<RecordingProvider> recorder;
  Provider* provider = opened->get();
  if (!flags.record_dir.empty()) {
    writer = std::make_unique<FileProviderWriter>(
        flags.record_dir, *vocab, provider->descriptor().model_name,
        provider->descriptor().mode);
    recorder = std::make_unique<RecordingProvider>(*provider, *vocab, *writer);
    provider = recorder.get();
  }

  absl::StatusOr<EmbeddingTable> table =
      detail::LoadTable(flags.embeddings, *vocab, provider);
  if (!table.ok()) {
    return detail::Report(err, detail::CodeFor(table.status(), kConfigError),
                          table.status());
  }
  DistanceCache distances(*table);
  if (!flags.cache_dir.empty()) {
    absl::StatusOr<std::string> matrix = internal::ReadFile(
        std::filesystem::path(flags.cache_dir) / "distances.bin");
    if (matrix.ok()) {
      if (absl::Status s = LoadDistanceMatrix(*matrix, *vocab, distances);
          !s.ok()) {
        return detail::Report(err, kConfigError, s);
      }
    }
  }

  NonSensitiveLoadResult nonsensitive;
  if (flags.nonsensitive.empty()) {
    nonsensitive = DefaultNonSensitive(*vocab);
  } else {
    absl::StatusOr<NonSensitiveLoadResult> loaded =
        LoadNonSensitive(flags.nonsensitive, *vocab);
    if (!loaded.ok()) return detail::Report(err, kConfigError, loaded.status());
    nonsensitive = *std::move(loaded);
  }
  if (!nonsensitive.missing.empty()) {
    err << "warning: " << nonsensitive.missing.size()
        << " non-sensitive tokens are not in the vocabulary and were skipped\n";
  }

  absl::StatusOr<std::vector<CorpusPrompt>> prompts =
      ReadCorpus(flags.input, *provider);
  if (!prompts.ok()) {
    return detail::Report(err, detail::CodeFor(prompts.status(), kConfigError),
                          prompts.status());
  }
  MechanismContext ctx{&*vocab, &distances, &nonsensitive.set, provider};
  CorpusOptions options{flags.jobs > 0 ? flags.jobs : internal::DefaultJobs(),
                        flags.skip_errors};
  absl::StatusOr<CorpusResult> result =
      PerturbCorpus(ctx, *config, *prompts, options);
  if (!result.ok()) {
    const bool calibration_failed =
        !config->clip_bound.has_value() &&
        result.status().message().find("calibration") !=
            std::string_view::npos;
    int code = kPartialFailure;
    if (calibration_failed) code = detail::CodeFor(result.status(), kConfigError);
    return detail::Report(err, code, result.status());
  }
  if (absl::Status s = internal::WriteFileAtomically(
          flags.output, EncodeArtifact(*result, *config));
      !s.ok()) {
    return detail::Report(err, kConfigError, s);
  }
  if (writer) {
    if (absl::Status s = writer->Finish(); !s.ok()) {
      return detail::Report(err, kConfigError, s);
    }
  }

  MechanismConfig effective = *config;
  effective.clip_bound = result->summary.clip_bound;
  nlohmann::json manifest = {
      {"command", "perturb"},
      {"config", effective.ToJson()},
      {"provider", detail::DescribeProvider(*provider)},
      {"inputs",
       {{"input", flags.input},
        {"vocab", flags.vocab},
        {"embeddings", flags.embeddings},
        {"nonsensitive", flags.nonsensitive}}},
      {"outputs", {flags.output}},
      {"seed", config->seed},
      {"summary", result->summary.ToJson()},
      {"timing",
       {{"total_seconds", detail::SecondsSince(start)},
        {"perturb_seconds", result->summary.total_seconds},
        {"mean_seconds_per_prompt", result->summary.mean_seconds_per_prompt}}}};
  if (absl::Status s = detail::WriteManifest(flags.output, manifest); !s.ok()) {
    return detail::Report(err, kConfigError, s);
  }
  out << "perturbed " << result->summary.n_prompts << " prompts ("
      << result->summary.n_failed << " failed), max effective epsilon "
      << result->summary.max_effective_epsilon << ", seed " << config->seed
      << "\n";
  return kOk;
}

struct AttackFlags {
  std::string artifact;
  std::string attack = "knn";
  int k = 10;
  std::string vocab;
  std::string embeddings;
  std::string provider;
  std::string output;
  std::string positions_csv;
  int jobs = 0;
};

inline int RunAttack(const AttackFlags& flags, std::ostream& out,
                     std::ostream& err) {
  const auto start = detail::Clock::now();
  if (flags.artifact.empty()) {
    return detail::Report(err, kConfigError,
                          absl::InvalidArgumentError("--artifact is required"));
  }
  if (flags.attack != "knn" && flags.attack != "mti") {
    return detail::Report(
        err, kConfigError,
        absl::InvalidArgumentError("--attack must be knn or mti"));
  }
  absl::StatusOr<std::vector<ArtifactEntry>> artifact =
      ReadArtifact(flags.artifact);
  if (!artifact.ok()) {
    return detail::Report(err, kConfigError, artifact.status());
  }
  absl::StatusOr<Vocabulary> vocab = detail::RequireVocabulary(flags.vocab);
  if (!vocab.ok()) return detail::Report(err, kConfigError, vocab.status());
  const int jobs = flags.jobs > 0 ? flags.jobs : internal::DefaultJobs();

  absl::StatusOr<AttackReport> report;
  std::unique_ptr<Provider> provider;
  if (flags.attack == "knn") {
    if (flags.embeddings.empty()) {
      absl::StatusOr<std::unique_ptr<Provider>> p =
          detail::OpenProvider(flags.provider, *vocab);
      if (!p.ok()) {
        return detail::Report(err, detail::CodeFor(p.status(), kConfigError),
                              p.status());
      }
      provider = *std::move(p);
    }
    absl::StatusOr<EmbeddingTable> table =
        detail::LoadTable(flags.embeddings, *vocab, provider.get());
    if (!table.ok()) {
      return detail::Report(err, detail::CodeFor(table.status(), kConfigError),
                            table.status());
    }
    DistanceCache distances(*table);
    report = KnnAttack(*artifact, distances, flags.k, jobs);
  } else {
    absl::StatusOr<std::unique_ptr<Provider>> p =
        detail::OpenProvider(flags.provider, *vocab);
    if (!p.ok()) {
      return detail::Report(err, detail::CodeFor(p.status(), kConfigError),
                            p.status());
    }
    provider = *std::move(p);
    report = MtiAttack(*artifact, *provider, jobs);
  }
  if (!report.ok()) {
    return detail::Report(err, detail::CodeFor(report.status(), kConfigError),
                          report.status());
  }
  nlohmann::json j = report->ToJson();
  if (!flags.output.empty()) {
    if (absl::Status s =
            internal::WriteFileAtomically(flags.output, j.dump(2) + "\n");
        !s.ok()) {
      return detail::Report(err, kConfigError, s);
    }
    nlohmann::json manifest = {
        {"command", "attack"},
        {"attack", flags.attack},
        {"k", flags.k},
        {"inputs", {{"artifact", flags.artifact}, {"vocab", flags.vocab}}},
        {"outputs", {flags.output}},
        {"timing", {{"total_seconds", detail::SecondsSince(start)}}}};
    if (provider) manifest["provider"] = detail::DescribeProvider(*provider);
    if (absl::Status s = detail::WriteManifest(flags.output, manifest);
        !s.ok()) {
      return detail::Report(err, kConfigError, s);
    }
  }
  if (!flags.positions_csv.empty()) {
    if (absl::Status s = internal::WriteFileAtomically(flags.positions_csv,
                                                       report->PositionsCsv());
        !s.ok()) {
      return detail::Report(err, kConfigError, s);
    }
  }
  out << flags.attack << " attack: asr " << report->asr << ", privacy score "
      << report->privacy_score << " over " << report->n_sensitive
      << " sensitive positions\n";
  return kOk;
}

struct EvaluateFlags {
  std::string artifact;
  std::string metric;
  std::string output;
  std::string vocab;
  std::string embeddings;
  std::string provider;
  std::string nonsensitive;
  int trials = kDefaultMappingTrials;
  std::optional<uint64_t> prompt_id;
  std::optional<size_t> position;
  int k = 10;
  double tail_threshold = 1e-4;
};

inline int RunEvaluate(const EvaluateFlags& flags, std::ostream& out,
                       std::ostream& err) {
  const auto start = detail::Clock::now();
  if (flags.metric != "rouge" && flags.metric != "mapping" &&
      flags.metric != "cdf") {
    return detail::Report(
        err, kConfigError,
        absl::InvalidArgumentError(internal::StrCat(
            "unknown metric '", flags.metric,
            "' (expected rouge, mapping or cdf)")));
  }
  if (flags.artifact.empty() || flags.output.empty()) {
    return detail::Report(
        err, kConfigError,
        absl::InvalidArgumentError("--artifact and --output are required"));
  }
  absl::StatusOr<std::vector<ArtifactEntry>> artifact =
      ReadArtifact(flags.artifact);
  if (!artifact.ok()) {
    return detail::Report(err, kConfigError, artifact.status());
  }
  nlohmann::json manifest = {
      {"command", "evaluate"},
      {"metric", flags.metric},
      {"inputs", {{"artifact", flags.artifact}}},
      {"outputs", nlohmann::json::array()}};
  auto write = [&](const std::filesystem::path& path,
                   const std::string& contents) -> absl::Status {
    manifest["outputs"].push_back(path.string());
    return internal::WriteFileAtomically(path, contents);
  };

  if (flags.metric == "rouge") {
    nlohmann::json prompts = nlohmann::json::array();
    double sum = 0.0;
    size_t n = 0;
    for (const ArtifactEntry& entry : *artifact) {
      if (entry.error) continue;
      const double f1 =
          RougeLF1(entry.prompt.original_ids, entry.prompt.PerturbedIds());
      prompts.push_back({{"prompt_id", entry.prompt.prompt_id},
                         {"rouge_l_f1", f1}});
      sum += f1;
      ++n;
    }
    nlohmann::json j = {{"metric", "rouge_l_f1"},
                        {"mean", n > 0 ? sum / n : 0.0},
                        {"prompts", prompts}};
    if (absl::Status s = write(flags.output, j.dump(2) + "\n"); !s.ok()) {
      return detail::Report(err, kConfigError, s);
    }
    out << "mean Rouge-L F1 " << (n > 0 ? sum / n : 0.0) << " over " << n
        << " prompts\n";
  } else {
    absl::StatusOr<Vocabulary> vocab = detail::RequireVocabulary(flags.vocab);
    if (!vocab.ok()) return detail::Report(err, kConfigError, vocab.status());
    std::unique_ptr<Provider> provider;
    absl::StatusOr<EmbeddingTable> table;
    if (flags.metric == "mapping" || flags.metric == "cdf") {
      absl::StatusOr<std::unique_ptr<Provider>> p =
          detail::OpenProvider(flags.provider, *vocab);
      if (!p.ok()) {
        return detail::Report(err, detail::CodeFor(p.status(), kConfigError),
                              p.status());
      }
      provider = *std::move(p);
      table = detail::LoadTable(flags.embeddings, *vocab, provider.get());
      if (!table.ok()) {
        return detail::Report(err,
                              detail::CodeFor(table.status(), kConfigError),
                              table.status());
      }
    }
    DistanceCache distances(*table);
    NonSensitiveLoadResult nonsensitive = DefaultNonSensitive(*vocab);
    if (!flags.nonsensitive.empty()) {
      absl::StatusOr<NonSensitiveLoadResult> loaded =
          LoadNonSensitive(flags.nonsensitive, *vocab);
      if (!loaded.ok()) {
        return detail::Report(err, kConfigError, loaded.status());
      }
      nonsensitive = *std::move(loaded);
    }
    MechanismContext ctx{&*vocab, &distances, &nonsensitive.set,
                         provider.get()};

    // Mechanism settings come from the artifact itself.
    const ArtifactEntry* first = nullptr;
    for (const ArtifactEntry& entry : *artifact) {
      if (!entry.error) {
        first = &entry;
        break;
      }
    }
    if (first == nullptr) {
      return detail::Report(
          err, kConfigError,
          absl::InvalidArgumentError("artifact has no successful prompts"));
    }
    MechanismConfig config;
    if (absl::Status s = config.MergeJson(first->config); !s.ok()) {
      return detail::Report(err, kConfigError, s);
    }
    if (!config.clip_bound) {
      return detail::Report(
          err, kConfigError,
          absl::InvalidArgumentError("artifact config has no clip bound"));
    }
    absl::StatusOr<ClipBound> bound = ClipBound::Create(*config.clip_bound);
    if (!bound.ok()) return detail::Report(err, kConfigError, bound.status());

    if (flags.metric == "mapping") {
      std::string csv =
          "prompt_id,position,token_id,trials,distinct_outputs,"
          "retention_count,retention_ratio\n";
      nlohmann::json rows = nlohmann::json::array();
      for (const ArtifactEntry& entry : *artifact) {
        if (entry.error) continue;
        if (flags.prompt_id && entry.prompt.prompt_id != *flags.prompt_id) {
          continue;
        }
        for (const PerturbationRecord& r : entry.prompt.records) {
          if (r.skipped) continue;
          if (flags.position && r.position != *flags.position) continue;
          absl::StatusOr<MappingStats> stats =
              ComputeMappingStats(ctx, config, *bound,
                                  entry.prompt.original_ids, r.position,
                                  flags.trials);
          if (!stats.ok()) {
            return detail::Report(
                err, detail::CodeFor(stats.status(), kConfigError),
                stats.status());
          }
          csv += internal::StrCat(
              entry.prompt.prompt_id, ",", r.position, ",", stats->token_id,
              ",", stats->trials, ",", stats->distinct_outputs, ",",
              stats->retention_count, ",",
              internal::FormatDouble(stats->retention_ratio), "\n");
          nlohmann::json row = stats->ToJson();
          row["prompt_id"] = entry.prompt.prompt_id;
          row["position"] = r.position;
          rows.push_back(std::move(row));
        }
      }
      std::filesystem::path csv_path = flags.output;
      csv_path += ".csv";
      if (absl::Status s = write(flags.output,
                                 nlohmann::json{{"metric", "mapping"},
                                                {"trials", flags.trials},
                                                {"tokens", rows}}
                                         .dump(2) +
                                     "\n");
          !s.ok()) {
        return detail::Report(err, kConfigError, s);
      }
      if (absl::Status s = write(csv_path, csv); !s.ok()) {
        return detail::Report(err, kConfigError, s);
      }
      out << "mapping stats for " << rows.size() << " positions written to "
          << flags.output << "\n";
    } else {
      if (!flags.prompt_id || !flags.position) {
        return detail::Report(
            err, kConfigError,
            absl::InvalidArgumentError(
                "--metric cdf needs --prompt-id and --position"));
      }
      const ArtifactEntry* target = nullptr;
      for (const ArtifactEntry& entry : *artifact) {
        if (!entry.error && entry.prompt.prompt_id == *flags.prompt_id) {
          target = &entry;
        }
      }
      if (target == nullptr ||
          *flags.position >= target->prompt.original_ids.size()) {
        return detail::Report(
            err, kConfigError,
            absl::InvalidArgumentError("no such prompt id / position"));
      }
      absl::StatusOr<UtilityVector> utilities = ComputeUtility(
          ctx, config, *bound, target->prompt.original_ids, *flags.position);
      if (!utilities.ok()) {
        return detail::Report(err,
                              detail::CodeFor(utilities.status(), kConfigError),
                              utilities.status());
      }
      absl::StatusOr<CdfReport> report =
          CdfDiagnostic(utilities->scores, config.epsilon, config.n_buckets,
                        flags.k, flags.tail_threshold);
      if (!report.ok()) {
        return detail::Report(err, kConfigError, report.status());
      }
      std::filesystem::path standard = flags.output, bucketized = flags.output;
      standard += ".standard.csv";
      bucketized += ".bucketized.csv";
      if (absl::Status s = write(flags.output,
                                 report->SummaryJson().dump(2) + "\n");
          !s.ok()) {
        return detail::Report(err, kConfigError, s);
      }
      if (absl::Status s = write(standard, report->standard.ToCsv()); !s.ok()) {
        return detail::Report(err, kConfigError, s);
      }
      if (absl::Status s = write(bucketized, report->bucketized.ToCsv());
          !s.ok()) {
        return detail::Report(err, kConfigError, s);
      }
      out << "tail mass (p < " << flags.tail_threshold << "): standard "
          << report->standard_tail_mass << ", bucketized "
          << report->bucketized_tail_mass << "; analytic top-" << flags.k
          << " bound " << report->analytic_bound << "\n";
    }
    if (provider) manifest["provider"] = detail::DescribeProvider(*provider);
  }
  manifest["timing"] = {{"total_seconds", detail::SecondsSince(start)}};
  if (absl::Status s = detail::WriteManifest(flags.output, manifest); !s.ok()) {
    return detail::Report(err, kConfigError, s);
  }
  return kOk;
}

struct DpCheckFlags {
  size_t vocab_size = 50;
  std::vector<double> epsilons = {2.0};
  // 0 checks the standard mechanism.
  std::vector<int> buckets = {50};
  int fixtures = 5;
  std::string kind = "random";
  uint64_t seed = 0;
  std::string output;
};

// Utility matrices for the privacy check. "random": iid uniform [0, 1).
// "identical": one random row shared by every origin. "adversarial": each
// origin pushes a single token to the top and leaves the rest in a narrow
// band, so bucket sizes are as skewed as possible.
inline std::vector<std::vector<double>> MakeDpFixture(const std::string& kind,
                                                      size_t n,
                                                      RandomStream& rng) {
  std::vector<std::vector<double>> u(n, std::vector<double>(n));
  if (kind == "identical") {
    std::vector<double> row(n);
    for (double& x : row) x = rng.UniformDouble();
    for (auto& r : u) r = row;
  } else if (kind == "adversarial") {
    for (size_t t = 0; t < n; ++t) {
      for (size_t y = 0; y < n; ++y) u[t][y] = 0.1 * rng.UniformDouble();
      u[t][t] = 1.0;
      u[t][(t + 1) % n] = 0.5 + 0.1 * rng.UniformDouble();
    }
  } else {
    for (auto& r : u) {
      for (double& x : r) x = rng.UniformDouble();
    }
  }
  return u;
}

inline int RunDpCheck(const DpCheckFlags& flags, std::ostream& out,
                      std::ostream& err) {
  if (flags.vocab_size < 2 || flags.vocab_size > kMaxDpCheckVocabulary) {
    return detail::Report(
        err, kConfigError,
        absl::InvalidArgumentError(internal::StrCat(
            "--vocab-size must be in [2, ", kMaxDpCheckVocabulary,
            "]; exact enumeration is cubic in the vocabulary size")));
  }
  if (flags.kind != "random" && flags.kind != "identical" &&
      flags.kind != "adversarial") {
    return detail::Report(
        err, kConfigError,
        absl::InvalidArgumentError(
            "--fixtures-kind must be random, identical or adversarial"));
  }
  for (double eps : flags.epsilons) {
    if (!(eps > 0.0)) {
      return detail::Report(
          err, kConfigError,
          absl::InvalidArgumentError("epsilon must be positive"));
    }
  }
  bool all_passed = true;
  nlohmann::json results = nlohmann::json::array();
  RandomStream rng = RandomStream::Derive(flags.seed, {flags.vocab_size});
  for (int f = 0; f < flags.fixtures; ++f) {
    std::vector<std::vector<double>> u =
        MakeDpFixture(flags.kind, flags.vocab_size, rng);
    for (double eps : flags.epsilons) {
      for (int nb : flags.buckets) {
        std::optional<int> buckets =
            nb > 0 ? std::optional<int>(nb) : std::nullopt;
        absl::StatusOr<DpCheckResult> r = DpRatioCheck(u, eps, buckets);
        if (!r.ok()) return detail::Report(err, kConfigError, r.status());
        all_passed = all_passed && r->passed;
        out << (r->passed ? "PASS" : "FAIL") << " fixture=" << f
            << " eps=" << eps << " buckets="
            << (buckets ? std::to_string(*buckets) : std::string("none"))
            << " max_ratio=" << r->max_ratio << " bound=" << r->bound
            << " eps_prime=" << r->max_cross_epsilon_prime << "\n";
        if (r->per_origin_undercount) {
          out << "  note: per-origin eps' undercounts this fixture\n";
        }
        results.push_back({{"fixture", f},
                           {"epsilon", eps},
                           {"buckets", buckets ? nlohmann::json(*buckets)
                                               : nlohmann::json(nullptr)},
                           {"max_ratio", r->max_ratio},
                           {"bound", r->bound},
                           {"sensitivity", r->sensitivity},
                           {"max_origin_epsilon_prime",
                            r->max_origin_epsilon_prime},
                           {"max_cross_epsilon_prime",
                            r->max_cross_epsilon_prime},
                           {"per_origin_undercount", r->per_origin_undercount},
                           {"passed", r->passed}});
      }
    }
  }
  if (!flags.output.empty()) {
    nlohmann::json j = {{"vocab_size", flags.vocab_size},
                        {"kind", flags.kind},
                        {"seed", flags.seed},
                        {"passed", all_passed},
                        {"results", results}};
    if (absl::Status s =
            internal::WriteFileAtomically(flags.output, j.dump(2) + "\n");
        !s.ok()) {
      return detail::Report(err, kConfigError, s);
    }
    if (absl::Status s = detail::WriteManifest(
            flags.output, {{"command", "dp-check"},
                           {"seed", flags.seed},
                           {"outputs", {flags.output}}});
        !s.ok()) {
      return detail::Report(err, kConfigError, s);
    }
  }
  return all_passed ? kOk : kPrivacyViolation;
}

struct ServeCheckFlags {
  std::string provider;
  std::string vocab;
};

// Verifies that a provider is reachable and bound to the vocabulary.
inline int RunServeCheck(const ServeCheckFlags& flags, std::ostream& out,
                         std::ostream& err) {
  absl::StatusOr<Vocabulary> vocab = detail::RequireVocabulary(flags.vocab);
  if (!vocab.ok()) return detail::Report(err, kConfigError, vocab.status());
  absl::StatusOr<std::unique_ptr<Provider>> p =
      detail::OpenProvider(flags.provider, *vocab);
  if (!p.ok()) {
    return detail::Report(err, detail::CodeFor(p.status(), kConfigError),
                          p.status());
  }
  out << detail::DescribeProvider(**p).dump() << "\n";
  return kOk;
}

// Entry point; args[0] is the program name.
inline int RunCli(const std::vector<std::string>& args, std::ostream& out,
                  std::ostream& err) {
  CLI::App app{"Context-aware differentially private token perturbation"};
  app.require_subcommand(1);

  SetupFlags setup;
  CLI::App* setup_cmd =
      app.add_subcommand("setup", "Precompute distances and calibrate the clip bound");
  setup_cmd->add_option("--vocab", setup.vocab, "Vocabulary file")->required();
  setup_cmd->add_option("--embeddings", setup.embeddings, "Embedding table");
  setup_cmd->add_option("--provider", setup.provider,
                        "file:DIR or http://HOST:PORT");
  setup_cmd->add_option("--cache-dir", setup.cache_dir, "Output directory")
      ->required();
  setup_cmd->add_flag("--precompute-distances", setup.precompute,
                      "Materialize the full |V| x |V| distance matrix");
  setup_cmd->add_option("--calibration-input", setup.calibration_input,
                        "Prompts used to calibrate the clip bound");
  setup_cmd->add_option("--calibration-samples", setup.calibration_samples,
                        "Logit vectors used for calibration");
  setup_cmd->add_option("--mode", setup.mode, "bidirectional or causal");

  PerturbFlags perturb;
  CLI::App* perturb_cmd =
      app.add_subcommand("perturb", "Perturb a corpus of prompts");
  perturb_cmd->add_option("--input", perturb.input, "Prompts file");
  perturb_cmd->add_option("--output", perturb.output, "Artifact (JSON-lines)");
  perturb_cmd->add_option("--vocab", perturb.vocab, "Vocabulary file");
  perturb_cmd->add_option("--embeddings", perturb.embeddings,
                          "Embedding table (default: fetch from provider)");
  perturb_cmd->add_option("--provider", perturb.provider,
                          "file:DIR or http://HOST:PORT");
  perturb_cmd->add_option("--nonsensitive", perturb.nonsensitive,
                          "Non-sensitive token list (default: shipped list)");
  perturb_cmd->add_option("--config", perturb.config_file,
                          "Config JSON or a previous run manifest");
  perturb_cmd->add_option("--cache-dir", perturb.cache_dir,
                          "Directory written by `setup`");
  perturb_cmd->add_option("--record", perturb.record_dir,
                          "Record provider responses into a fixture directory");
  perturb_cmd->add_option("--epsilon", perturb.epsilon, "Privacy budget");
  perturb_cmd->add_option("--lambda-l", perturb.lambda_l,
                          "Logit importance (default 0.5)");
  perturb_cmd->add_option("--lambda-d", perturb.lambda_d,
                          "Distance importance (default 1.0)");
  perturb_cmd->add_option("--buckets", perturb.buckets,
                          "Bucket count (default 50)");
  perturb_cmd->add_option("--seed", perturb.seed, "Random seed");
  perturb_cmd->add_option("--clip-bound", perturb.clip_bound, "Logit clip bound");
  perturb_cmd->add_option("--calibration-samples", perturb.calibration_samples,
                          "Logit vectors used to calibrate the bound (default 16)");
  perturb_cmd->add_option("--mode", perturb.mode, "bidirectional or causal");
  perturb_cmd->add_option("--sampler", perturb.sampler,
                          "bucketized (default) or standard");
  perturb_cmd->add_option("--policy", perturb.policy,
                          "skip (default) or perturb-all");
  perturb_cmd->add_flag("--skip-errors", perturb.skip_errors,
                        "Record failed prompts and continue");
  perturb_cmd->add_option("--jobs", perturb.jobs, "Worker threads");

  AttackFlags attack;
  CLI::App* attack_cmd =
      app.add_subcommand("attack", "Run a privacy attack on an artifact");
  attack_cmd->add_option("--artifact", attack.artifact, "Artifact file");
  attack_cmd->add_option("--attack", attack.attack, "knn or mti");
  attack_cmd->add_option("--k", attack.k, "Neighbors for knn (default 10)");
  attack_cmd->add_option("--vocab", attack.vocab, "Vocabulary file");
  attack_cmd->add_option("--embeddings", attack.embeddings, "Embedding table");
  attack_cmd->add_option("--provider", attack.provider,
                         "Attacker provider (mti) or embedding source");
  attack_cmd->add_option("--output", attack.output, "Report JSON");
  attack_cmd->add_option("--positions-csv", attack.positions_csv,
                         "Per-position CSV");
  attack_cmd->add_option("--jobs", attack.jobs, "Worker threads");

  EvaluateFlags evaluate;
  CLI::App* evaluate_cmd =
      app.add_subcommand("evaluate", "Compute utility and privacy metrics");
  evaluate_cmd->add_option("--artifact", evaluate.artifact, "Artifact file");
  evaluate_cmd->add_option("--metric", evaluate.metric, "rouge, mapping or cdf")
      ->required();
  evaluate_cmd->add_option("--output", evaluate.output, "Output path");
  evaluate_cmd->add_option("--vocab", evaluate.vocab, "Vocabulary file");
  evaluate_cmd->add_option("--embeddings", evaluate.embeddings,
                           "Embedding table");
  evaluate_cmd->add_option("--provider", evaluate.provider,
                           "file:DIR or http://HOST:PORT");
  evaluate_cmd->add_option("--nonsensitive", evaluate.nonsensitive,
                           "Non-sensitive token list");
  evaluate_cmd->add_option("--trials", evaluate.trials,
                           "Mapping trials per token (default 1000)");
  evaluate_cmd->add_option("--prompt-id", evaluate.prompt_id, "Prompt to use");
  evaluate_cmd->add_option("--position", evaluate.position, "Token position");
  evaluate_cmd->add_option("--k", evaluate.k, "Top-k for the analytic bound");
  evaluate_cmd->add_option("--tail-threshold", evaluate.tail_threshold,
                           "Per-token probability counted as tail");

  DpCheckFlags dp;
  CLI::App* dp_cmd = app.add_subcommand(
      "dp-check", "Exact-enumeration privacy check on synthetic fixtures");
  dp_cmd->add_option("--vocab-size", dp.vocab_size, "Fixture vocabulary size");
  dp_cmd->add_option("--epsilon", dp.epsilons, "Budgets to check")
      ->expected(1, -1);
  dp_cmd->add_option("--buckets", dp.buckets,
                     "Bucket counts; 0 checks the standard mechanism")
      ->expected(1, -1);
  dp_cmd->add_option("--fixtures", dp.fixtures, "Number of fixtures");
  dp_cmd->add_option("--fixtures-kind", dp.kind,
                     "random, identical or adversarial");
  dp_cmd->add_option("--seed", dp.seed, "Fixture seed");
  dp_cmd->add_option("--output", dp.output, "Results JSON");

  ServeCheckFlags serve;
  CLI::App* serve_cmd = app.add_subcommand(
      "serve-check", "Check that a provider is reachable and vocabulary-bound");
  serve_cmd->add_option("--provider", serve.provider,
                        "file:DIR or http://HOST:PORT");
  serve_cmd->add_option("--vocab", serve.vocab, "Vocabulary file");

  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kConfigError;
  }

  if (setup_cmd->parsed()) return RunSetup(setup, out, err);
  if (perturb_cmd->parsed()) return RunPerturb(perturb, out, err);
  if (attack_cmd->parsed()) return RunAttack(attack, out, err);
  if (evaluate_cmd->parsed()) return RunEvaluate(evaluate, out, err);
  if (dp_cmd->parsed()) return RunDpCheck(dp, out, err);
  if (serve_cmd->parsed()) return RunServeCheck(serve, out, err);
  return kConfigError;
}

}  // namespace cape::cli

#endif  // CAPE_TOOLS_CAPE_CLI_H_
