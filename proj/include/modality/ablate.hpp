#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "modality/experiment.hpp"

namespace modality::ablate {

struct AblationSpec {
    std::vector<net::NetConfig> variants;  // main is added when missing
    std::vector<unsigned> feature_masks;   // evaluated with the main CNN and the perceptron stage
    bool shared_plans = true;
};

/// Every single-change variant: six time scales, avg/conv pooling, magnitude
/// and dB input, mean-octave chroma.
AblationSpec default_spec();

struct AblationRow {
    std::string label;
    std::string kind;  // "cnn" or "features"
    double r2 = 0.0;
    double delta = 0.0;
    double ci_half_width = 0.0;
    bool invariant = false;       // key-class invariance of a freshly built net
    bool skipped = false;
    std::string notice;
    std::uint64_t plan_fingerprint = 0;
};

struct AblationTable {
    std::vector<AblationRow> rows;

    /// label,kind,r2,delta_r2,ci_half_width,invariant,status
    std::string table() const;
    /// label,delta_r2,ci_half_width
    std::string plot_data() const;
};

/// Evaluates each variant with the same fold plans as the main configuration
/// and reports R^2 differences against it. `base` supplies sizes and seeds.
AblationTable run_ablation(const AblationSpec& spec, const std::vector<eval::PreparedExcerpt>& dataset,
                           const eval::ExperimentConfig& base, std::ostream* log = nullptr);

/// Whether every excerpt carries the columns `kind` needs.
bool input_available(const std::vector<eval::PreparedExcerpt>& dataset, net::InputKind kind);

}  // namespace modality::ablate
