#pragma once

#include <stdexcept>
#include <string>

namespace smem {

// Shape/dimension mismatch on a tensor operation.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Out-of-range token id, slot index, or row index.
struct IndexError : std::out_of_range {
    explicit IndexError(const std::string& msg) : std::out_of_range(msg) {}
};

// API used outside its documented contract (non-scalar backward,
// consumed tape, missing grad on a registered parameter, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Slot scoring asked for with no recorded accesses (C == 0 or all masked).
struct EmptyBatchError : ContractError {
    explicit EmptyBatchError(const std::string& msg) : ContractError(msg) {}
};

// Run configuration failed to parse or validate. CLI exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Stage-order violation (e.g. finetune without a recovered checkpoint).
// CLI exit code 3.
struct StageError : std::runtime_error {
    explicit StageError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf loss during training. Carries the offending step. CLI exit code 4.
struct TrainingDivergedError : std::runtime_error {
    long step;
    TrainingDivergedError(long at_step, const std::string& msg)
        : std::runtime_error(msg), step(at_step) {}
};

// Report schema version mismatch. CLI exit code 5.
struct SchemaError : std::runtime_error {
    explicit SchemaError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable/unwritable file, blob checksum mismatch.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// A parameter that was supposed to stay frozen changed (checksum diff).
// A kind of pipeline-contract failure, so it shares the stage exit code.
struct FreezeViolationError : StageError {
    explicit FreezeViolationError(const std::string& msg) : StageError(msg) {}
};

}  // namespace smem
