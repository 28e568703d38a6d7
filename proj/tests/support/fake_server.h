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

#ifndef CAPE_TESTS_SUPPORT_FAKE_SERVER_H_
#define CAPE_TESTS_SUPPORT_FAKE_SERVER_H_

// In-process stand-in for the model sidecar, speaking the HTTP wire
// contract (/info, /tokenize, /logits, /embeddings) over a World.

#include <atomic>
#include <string>
#include <thread>

#include "cape/providers.h"
#include "httplib.h"
#include "json.hpp"
#include "support/fixtures.h"

namespace cape::testing {

class FakeSidecar {
 public:
  explicit FakeSidecar(World& world,
                       ContextMode mode = ContextMode::kBidirectional)
      : world_(&world), mode_(mode) {
    server_.Get("/info", [this](const httplib::Request&, httplib::Response& res) {
      ++requests;
      if (Flake(res)) return;
      nlohmann::json info = {{"model", "fake-mlm"},
                             {"vocab_size", world_->vocab.size()},
                             {"dim", world_->table.dim()},
                             {"mode", ContextModeName(mode_)},
                             {"vocab_sha256", vocab_sha256_override.empty()
                                                  ? world_->vocab.Sha256()
                                                  : vocab_sha256_override}};
      res.set_content(info.dump(), "application/json");
    });
    server_.Post("/tokenize", [this](const httplib::Request& req,
                                     httplib::Response& res) {
      ++requests;
      if (Flake(res)) return;
      nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.contains("text")) {
        return Error(res, 400, "malformed JSON");
      }
      absl::StatusOr<std::vector<TokenId>> ids =
          TokenizePretokenized(world_->vocab, body["text"].get<std::string>());
      if (!ids.ok()) return Error(res, 400, std::string(ids.status().message()));
      res.set_content(nlohmann::json{{"token_ids", *ids}}.dump(),
                      "application/json");
    });
    server_.Post("/logits", [this](const httplib::Request& req,
                                   httplib::Response& res) {
      ++requests;
      ++logit_requests;
      if (Flake(res)) return;
      nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.contains("token_ids") ||
          !body.contains("target_position")) {
        return Error(res, 400, "malformed JSON");
      }
      ContextWindow window{body["token_ids"].get<std::vector<TokenId>>(),
                           body["target_position"].get<size_t>(), mode_};
      if (window.target_position >= window.token_ids.size()) {
        return Error(res, 400, "position out of range");
      }
      absl::StatusOr<LogitVector> logits =
          world_->provider->ContextLogits(window);
      if (!logits.ok()) {
        return Error(res, 400, std::string(logits.status().message()));
      }
      // Served as float32, like a real model.
      std::vector<float> values(logits->values.begin(), logits->values.end());
      res.set_content(nlohmann::json{{"logits", values}}.dump(),
                      "application/json");
    });
    server_.Get("/embeddings", [this](const httplib::Request&,
                                      httplib::Response& res) {
      ++requests;
      if (Flake(res)) return;
      res.set_content(EncodeEmbeddingsBinary(world_->table, &world_->vocab),
                      "application/octet-stream");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~FakeSidecar() {
    server_.stop();
    thread_.join();
  }

  std::string url() const {
    return internal::StrCat("http://127.0.0.1:", port_);
  }

  std::atomic<int> requests{0};
  std::atomic<int> logit_requests{0};
  // The next `failures` requests get a 503.
  std::atomic<int> failures{0};
  std::string vocab_sha256_override;

 private:
  bool Flake(httplib::Response& res) {
    if (failures.load() > 0) {
      --failures;
      Error(res, 503, "warming up");
      return true;
    }
    return false;
  }
  static void Error(httplib::Response& res, int status,
                    const std::string& message) {
    res.status = status;
    res.set_content(nlohmann::json{{"error", message}}.dump(),
                    "application/json");
  }

  World* world_;
  ContextMode mode_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace cape::testing

#endif  // CAPE_TESTS_SUPPORT_FAKE_SERVER_H_
