#pragma once

// External choice provider: forwards each (persona observables, menu)
// decision to a remote service over HTTP JSON and returns the chosen option
// index. This is the plug-in boundary where a live model backend would sit.
//
// Reference wire shape (documented contract, one request per decision):
//   POST <endpoint>
//   {"persona": {"age_band": a, "gender_code": g, "income_band": i,
//                "education_band": e},
//    "options": [[attr, ...], ...],   // K rows of q attribute levels
//    "has_outside": true}
//   -> {"choice": j}                  // 0..K, K = outside
//
// Failures (transport, bad status, unparsable body, out-of-range index) are
// retried up to `max_retries` attempts in total; after that a typed
// provider_error is thrown. There is never a silent fallback to an
// in-process provider.

#include <optional>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "aem/errors.hpp"
#include "aem/synth_gen.hpp"

namespace aem {

class ExternalProvider : public ChoiceProvider {
 public:
  explicit ExternalProvider(std::string endpoint, int max_retries = 3)
      : endpoint_(std::move(endpoint)), max_retries_(max_retries) {
    if (max_retries_ < 1) throw validation_error("external provider: max_retries must be >= 1");
    // Split "http://host:port/path" (scheme optional) into base and path.
    std::string rest = endpoint_;
    const auto scheme = rest.find("://");
    std::string prefix;
    if (scheme != std::string::npos) {
      prefix = rest.substr(0, scheme + 3);
      rest = rest.substr(scheme + 3);
    } else {
      prefix = "http://";
    }
    const auto slash = rest.find('/');
    base_url_ = prefix + (slash == std::string::npos ? rest : rest.substr(0, slash));
    path_ = slash == std::string::npos ? "/" : rest.substr(slash);
  }

  int choose(const Persona& persona, const ChoiceTask& menu, Rng&) override {
    nlohmann::json req;
    req["persona"] = {{"age_band", persona.observables.size() > 0 ? persona.observables[0] : 0.0},
                      {"gender_code", persona.observables.size() > 1 ? persona.observables[1] : 0.0},
                      {"income_band", persona.observables.size() > 2 ? persona.observables[2] : 0.0},
                      {"education_band",
                       persona.observables.size() > 3 ? persona.observables[3] : 0.0}};
    nlohmann::json options = nlohmann::json::array();
    for (std::size_t j = 0; j < menu.k_inside(); ++j) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t a = 0; a < menu.q(); ++a) row.push_back(menu.options(j, a));
      options.push_back(std::move(row));
    }
    req["options"] = std::move(options);
    req["has_outside"] = menu.has_outside;
    const std::string body = req.dump();

    std::string last_failure = "no attempt made";
    for (int attempt = 1; attempt <= max_retries_; ++attempt) {
      std::optional<std::string> resp = post_json(body);
      if (!resp) {
        last_failure = "transport failure";
        continue;
      }
      try {
        nlohmann::json parsed = nlohmann::json::parse(*resp);
        const int choice = parsed.at("choice").get<int>();
        if (choice < 0 || choice > menu.outside_index()) {
          last_failure = "choice index out of range";
          continue;
        }
        return choice;
      } catch (const nlohmann::json::exception&) {
        last_failure = "unparsable response";
      }
    }
    throw provider_error("external provider " + endpoint_ + " unavailable after " +
                         std::to_string(max_retries_) + " attempts (" + last_failure + ")");
  }

  std::string name() const override { return "external"; }

 protected:
  // Transport hook; overridden by tests with a canned stub. Returns the raw
  // response body on HTTP 200, std::nullopt otherwise.
  virtual std::optional<std::string> post_json(const std::string& body) {
    httplib::Client client(base_url_);
    client.set_connection_timeout(5, 0);
    client.set_read_timeout(5, 0);
    httplib::Result res = client.Post(path_, body, "application/json");
    if (!res || res->status != 200) return std::nullopt;
    return res->body;
  }

 private:
  std::string endpoint_;
  std::string base_url_;
  std::string path_;
  int max_retries_;
};

}  // namespace aem
