#pragma once

#include "lerf/common.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace lerf {

/// Raised when the embedding service cannot be reached or answers badly.
class ProviderUnavailable : public Error {
 public:
  using Error::Error;
};

/// Turns text into unit-norm embeddings.
class TextEmbeddingProvider {
 public:
  virtual ~TextEmbeddingProvider() = default;
  virtual std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts) const = 0;
};

/// Client for a POST /embed {"texts": [...]} -> {"embeddings": [[...]]} service.
class HttpTextProvider : public TextEmbeddingProvider {
 public:
  /// `address` is "host:port" or "http://host:port".
  explicit HttpTextProvider(std::string address, double timeout_s = 10.0);
  std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts) const override;
  const std::string& address() const { return address_; }

 private:
  std::string address_;
  std::string host_;
  int port_ = 0;
  double timeout_s_;
};

/// Synthetic mode: a fixed phrase table; unknown phrases are an error.
class TableTextProvider : public TextEmbeddingProvider {
 public:
  explicit TableTextProvider(std::map<std::string, Eigen::VectorXd> table) : table_(std::move(table)) {}
  std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts) const override;

 private:
  std::map<std::string, Eigen::VectorXd> table_;
};

}  // namespace lerf
