#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cortexbridge/bridge.hpp"
#include "cortexbridge/conformal.hpp"
#include "cortexbridge/generator.hpp"
#include "cortexbridge/prf.hpp"

namespace cortexbridge::pipeline {

struct ConfigInvalid : std::runtime_error {
    explicit ConfigInvalid(const std::string& msg) : std::runtime_error(msg) {}
};
struct MissingUpstream : std::runtime_error {
    explicit MissingUpstream(const std::string& msg) : std::runtime_error(msg) {}
};
struct LockHeld : std::runtime_error {
    explicit LockHeld(const std::string& msg) : std::runtime_error(msg) {}
};

// Synthetic dataset shape: a fine hemisphere stands in for the high-field
// acquisition, the coarse one for the low-field resampling target.
struct SynthSpec {
    int subjects = 8;
    int train_subjects = 6;
    int fine_rings = 20;
    int fine_segments = 40;
    int coarse_rings = 10;
    int coarse_segments = 20;
    int t_frames = 100;
    int stim_grid = 24;
    double extent_deg = 6.0;
    double tr_seconds = 1.0;
    double noise_sd_fine = 0.5;  // acquisition noise on the fine series
    double noise_sd = 5.0;       // corruption noise added after the round trip
    double beta_base = 40.0;
    double beta_span = 20.0;
    double sigma_min = 0.5;
    double sigma_slope = 0.15;
    double param_jitter = 0.05;
};

struct ExperimentConfig {
    std::string run_root = "runs";  // env CORTEXBRIDGE_RUN_ROOT overrides when set
    std::string run_name = "desk";
    uint64_t seed = 42;
    int resolution = 32;
    double validation_fraction = 0.2;
    uint64_t feature_seed = 1234;
    SynthSpec synth;
    int bridge_steps = 5;
    bridge::BridgeConfig bridge;
    bridge::TrainOptions train;
    conformal::ConformalOptions conformal;
    prf::PrfFitOptions prf_fit;
    prf::HrfModel hrf;
    std::vector<int> train_ids, test_ids;  // derived from counts when empty
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

// Dotted-path CLI override, e.g. ("bridge.tau", "0.05"); values parse as JSON
// first and fall back to a plain string.
void apply_override(nlohmann::json& j, const std::string& dotted, const std::string& value);

// Fills derived fields and checks invariants; throws ConfigInvalid.
void validate(ExperimentConfig& cfg);

std::string run_dir(const ExperimentConfig& cfg);

// Structural schema check for report.json; throws ConfigInvalid on a missing
// or mistyped field. The report stage self-checks its output with this.
void validate_report(const nlohmann::json& report);

extern const std::vector<std::string> kStages;  // execution order, "all" excluded

// Executes one stage (or "all"); throws MissingUpstream / ConfigInvalid /
// LockHeld / module errors. The config must already be validated.
void run(const std::string& stage, const ExperimentConfig& cfg);

// Full command-line entry: <stage> --config cfg.json [--dotted.path value]...
// Exit codes: 0 ok, 1 error, 2 missing upstream artifacts.
int cli_main(int argc, const char* const* argv);

}  // namespace cortexbridge::pipeline
