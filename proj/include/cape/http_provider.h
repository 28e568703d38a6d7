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

#ifndef CAPE_HTTP_PROVIDER_H_
#define CAPE_HTTP_PROVIDER_H_

// Client for the model-server sidecar.
//
//   GET  /info        {"model", "vocab_size", "dim", "mode", "vocab_sha256"}
//   POST /logits      {"token_ids": [int], "target_position": int}
//                     -> {"logits": [float; vocab_size]}
//   POST /tokenize    {"text": str} -> {"token_ids": [int]}
//   GET  /embeddings  binary embedding table (see vocab.h)
//
// Errors come back as {"error": str} with a non-2xx status. Logits are
// float32 on the server side; the client rounds each value to float32 so a
// live run and a replay of its recorded fixtures see identical numbers.

#include <algorithm>
#include <chrono>
#include <memory>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "cape/providers.h"
#include "cape/vocab.h"
#include "httplib.h"
#include "json.hpp"

namespace cape {

struct HttpProviderOptions {
  // Upper bound on concurrent requests from one provider.
  int max_in_flight = 8;
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{100};
  std::chrono::seconds timeout{30};
};

class HttpProvider : public Provider {
 public:
  // Queries /info and fails unless the server's vocabulary matches `vocab`.
  static absl::StatusOr<std::unique_ptr<HttpProvider>> Connect(
      std::string base_url, const Vocabulary& vocab,
      HttpProviderOptions options = {}) {
    auto provider = std::unique_ptr<HttpProvider>(
        new HttpProvider(std::move(base_url), vocab, options));
    absl::StatusOr<std::string> body = provider->Request("GET", "/info", "");
    if (!body.ok()) return MarkProviderError(body.status());
    nlohmann::json info = nlohmann::json::parse(*body, nullptr, false);
    if (info.is_discarded() || !info.contains("vocab_size") ||
        !info.contains("vocab_sha256")) {
      return MarkProviderError(
          absl::DataLossError("malformed /info response"));
    }
    ProviderDescriptor& d = provider->descriptor_;
    d.kind = ProviderKind::kHttp;
    d.vocab_size = info["vocab_size"].get<size_t>();
    d.vocabulary_hash = info["vocab_sha256"].get<std::string>();
    d.model_name = info.value("model", "");
    absl::StatusOr<ContextMode> mode =
        ParseContextMode(info.value("mode", "bidirectional"));
    if (!mode.ok()) return MarkProviderError(mode.status());
    d.mode = *mode;
    provider->dim_ = info.value("dim", size_t{0});
    if (absl::Status s = CheckBinding(*provider, vocab); !s.ok()) return s;
    return provider;
  }

  const ProviderDescriptor& descriptor() const override { return descriptor_; }
  size_t dim() const { return dim_; }
  const std::string& base_url() const { return base_url_; }

 protected:
  absl::StatusOr<std::vector<TokenId>> DoTokenize(
      std::string_view text) override {
    nlohmann::json request = {{"text", std::string(text)}};
    absl::StatusOr<std::string> body =
        Request("POST", "/tokenize", request.dump());
    if (!body.ok()) return body.status();
    nlohmann::json response = nlohmann::json::parse(*body, nullptr, false);
    if (response.is_discarded() || !response.contains("token_ids")) {
      return absl::DataLossError("malformed /tokenize response");
    }
    return response["token_ids"].get<std::vector<TokenId>>();
  }

  absl::StatusOr<LogitVector> DoContextLogits(
      const ContextWindow& window) override {
    if (window.mode != descriptor_.mode) {
      return absl::FailedPreconditionError(internal::StrCat(
          "server '", descriptor_.model_name, "' is ",
          ContextModeName(descriptor_.mode), ", request is ",
          ContextModeName(window.mode)));
    }
    nlohmann::json request = {{"token_ids", window.token_ids},
                              {"target_position", window.target_position}};
    absl::StatusOr<std::string> body =
        Request("POST", "/logits", request.dump());
    if (!body.ok()) return body.status();
    nlohmann::json response = nlohmann::json::parse(*body, nullptr, false);
    if (response.is_discarded() || !response.contains("logits") ||
        !response["logits"].is_array()) {
      return absl::DataLossError("malformed /logits response");
    }
    LogitVector out{{}, window.Key()};
    out.values.reserve(response["logits"].size());
    for (const auto& v : response["logits"]) {
      if (!v.is_number()) return absl::DataLossError("non-numeric logit");
      out.values.push_back(static_cast<double>(v.get<float>()));
    }
    return out;
  }

  absl::StatusOr<EmbeddingTable> DoFetchEmbeddingTable() override {
    absl::StatusOr<std::string> body = Request("GET", "/embeddings", "");
    if (!body.ok()) return body.status();
    return DecodeEmbeddingsBinary(*body, *vocab_);
  }

 private:
  HttpProvider(std::string base_url, const Vocabulary& vocab,
               HttpProviderOptions options)
      : base_url_(std::move(base_url)),
        vocab_(&vocab),
        options_(options),
        in_flight_(std::max(options.max_in_flight, 1)) {}

  // Retries transport failures and 5xx responses with exponential backoff;
  // 4xx responses fail immediately with the server's error message.
  absl::StatusOr<std::string> Request(std::string_view method,
                                      const std::string& path,
                                      const std::string& body) {
    in_flight_.acquire();
    struct Release {
      std::counting_semaphore<>* s;
      ~Release() { s->release(); }
    } release{&in_flight_};

    absl::Status last = absl::UnavailableError("no attempt made");
    auto backoff = options_.initial_backoff;
    for (int attempt = 0; attempt < std::max(options_.attempts, 1);
         ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
      httplib::Client client(base_url_);
      client.set_connection_timeout(options_.timeout);
      client.set_read_timeout(options_.timeout);
      client.set_write_timeout(options_.timeout);
      httplib::Result result =
          method == "GET" ? client.Get(path)
                          : client.Post(path, body, "application/json");
      if (!result) {
        last = absl::UnavailableError(
            internal::StrCat(method, " ", base_url_, path, " failed: ",
                         httplib::to_string(result.error())));
        continue;
      }
      if (result->status >= 200 && result->status < 300) {
        return std::move(result->body);
      }
      std::string message = result->body;
      nlohmann::json error = nlohmann::json::parse(message, nullptr, false);
      if (!error.is_discarded() && error.is_object() &&
          error.contains("error")) {
        message = error["error"].get<std::string>();
      }
      last = absl::Status(
          result->status >= 500 ? absl::StatusCode::kUnavailable
                                : absl::StatusCode::kInvalidArgument,
          internal::StrCat(method, " ", path, " returned ", result->status, ": ",
                       message));
      if (result->status < 500) break;
    }
    return last;
  }

  std::string base_url_;
  const Vocabulary* vocab_;
  HttpProviderOptions options_;
  std::counting_semaphore<> in_flight_;
  ProviderDescriptor descriptor_;
  size_t dim_ = 0;
};

}  // namespace cape

#endif  // CAPE_HTTP_PROVIDER_H_
