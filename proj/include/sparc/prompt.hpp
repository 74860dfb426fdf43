#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparc/linalg.hpp"
#include "sparc/model.hpp"

// Soft prompts parameterized in a PCA subspace: P (T x K) expands to model
// space through the basis components, only P ever trains.

namespace sparc::prompt {

using linalg::SubspaceBasisXd;

struct SoftPrompt {
  std::string id;
  Eigen::MatrixXd p;      // T x K, trainable
  std::string basis_ref;  // id of the record providing W and mu
  std::vector<std::string> trained_on;
  bool frozen = false;

  Eigen::Index token_count() const { return p.rows(); }
  Eigen::Index subspace_dim() const { return p.cols(); }
  long long parameter_count() const { return static_cast<long long>(p.size()); }
};

// P entries ~ N(0, 0.02^2), seeded.
SoftPrompt init_prompt(const SubspaceBasisXd& basis, int tokens, uint64_t seed,
                       std::string id = "", std::string basis_ref = "");

// P W + 1 mu' — every expanded token lies in the task's affine subspace.
// `add_mean` exists for ablations that drop the mu anchor.
Eigen::MatrixXd expand(const SoftPrompt& prompt, const SubspaceBasisXd& basis,
                       bool add_mean = true, std::string_view basis_id = {});

// Chain rule through expand: d loss/dP = (d loss/d embeds) W'.
Eigen::MatrixXd grad_to_subspace(const Eigen::MatrixXd& grad_embeds,
                                 const SubspaceBasisXd& basis);

struct TrainConfig {
  double lr = 1e-2;
  int epochs = 10;
  int batch = 8;
  double clip = 1.0;
  uint64_t seed = 0;
  bool add_mean = true;
};

struct TrainResult {
  std::vector<double> loss_curve;  // per-epoch mean loss
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// Adam on P only; the model must be frozen, the prompt unfrozen.
TrainResult train_prompt(const model::TinyLM& lm, SoftPrompt& prompt,
                         const SubspaceBasisXd& basis,
                         std::span<const model::Sequence> dataset, const TrainConfig& cfg);

// Joint prompt + adapter training for the hybrid mode; base weights stay put.
TrainResult train_prompt_with_lora(const model::TinyLM& lm, SoftPrompt& prompt,
                                   const SubspaceBasisXd& basis, model::LoraSet& adapters,
                                   std::span<const model::Sequence> dataset,
                                   const TrainConfig& cfg);

// One stored task: its id, subspace and prompt, in arrival order.
struct PromptRecord {
  std::string task_id;
  SubspaceBasisXd basis;
  SoftPrompt prompt;
};

class PromptStore {
 public:
  void add(PromptRecord record);  // ids must be unique
  const std::vector<PromptRecord>& records() const { return records_; }
  bool empty() const { return records_.empty(); }
  std::size_t size() const { return records_.size(); }

  const PromptRecord* find(std::string_view prompt_id) const;
  const PromptRecord* find_task(std::string_view task_id) const;

  // Mutable access for in-place fine-tuning; frozen prompts refuse.
  SoftPrompt& prompt_mut(std::string_view prompt_id);
  void freeze(std::string_view prompt_id);

  // dataset id -> prompt id; the target must exist.
  void route(const std::string& dataset_id, const std::string& prompt_id);
  std::optional<std::string> route_for(std::string_view dataset_id) const;
  const std::map<std::string, std::string>& routing() const { return routing_; }

  // All stored component rows stacked (for orthogonal initialization).
  Eigen::MatrixXd stacked_components() const;

  void save(const std::filesystem::path& path) const;
  static PromptStore load(const std::filesystem::path& path);

 private:
  std::vector<PromptRecord> records_;
  std::map<std::string, std::string> routing_;
};

}  // namespace sparc::prompt
