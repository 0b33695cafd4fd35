#include "lerf/provider.hpp"

#include "httplib.h"
#include "json.hpp"

#include <cmath>

namespace lerf {

using json = nlohmann::json;

HttpTextProvider::HttpTextProvider(std::string address, double timeout_s)
    : address_(std::move(address)), timeout_s_(timeout_s) {
  std::string rest = address_;
  if (rest.rfind("http://", 0) == 0) rest = rest.substr(7);
  while (!rest.empty() && rest.back() == '/') rest.pop_back();
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos) throw Error("provider address must be host:port, got '" + address_ + "'");
  host_ = rest.substr(0, colon);
  try {
    port_ = std::stoi(rest.substr(colon + 1));
  } catch (const std::exception&) {
    throw Error("provider address has a bad port: '" + address_ + "'");
  }
}

std::vector<Eigen::VectorXd> HttpTextProvider::embed(const std::vector<std::string>& texts) const {
  httplib::Client client(host_, port_);
  const auto sec = static_cast<time_t>(timeout_s_);
  const auto usec = static_cast<time_t>((timeout_s_ - static_cast<double>(sec)) * 1e6);
  client.set_connection_timeout(sec, usec);
  client.set_read_timeout(sec, usec);
  const json body = {{"texts", texts}};
  const auto res = client.Post("/embed", body.dump(), "application/json");
  if (!res) {
    throw ProviderUnavailable("embedding provider at " + address_ + " is unreachable (" +
                              httplib::to_string(res.error()) + "); pass --embedding-file to query without one");
  }
  if (res->status != 200) {
    throw ProviderUnavailable("embedding provider at " + address_ + " returned HTTP " + std::to_string(res->status) +
                              ": " + res->body);
  }
  std::vector<Eigen::VectorXd> out;
  try {
    const json doc = json::parse(res->body);
    const auto& arr = doc.at("embeddings");
    if (arr.size() != texts.size()) throw ProviderUnavailable("embedding provider returned the wrong number of vectors");
    for (const auto& e : arr) {
      const auto values = e.get<std::vector<double>>();
      Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
      if (!v.allFinite() || !(v.norm() > 0)) throw ProviderUnavailable("embedding provider returned a degenerate vector");
      out.push_back(v.normalized());
    }
  } catch (const json::exception& e) {
    throw ProviderUnavailable(std::string("embedding provider sent malformed JSON: ") + e.what());
  }
  return out;
}

std::vector<Eigen::VectorXd> TableTextProvider::embed(const std::vector<std::string>& texts) const {
  std::vector<Eigen::VectorXd> out;
  for (const auto& t : texts) {
    const auto it = table_.find(t);
    if (it == table_.end()) throw Error("phrase '" + t + "' is not in the phrase table");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace lerf
