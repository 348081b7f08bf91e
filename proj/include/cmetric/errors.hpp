#pragma once

#include <limits>
#include <stdexcept>
#include <string>

namespace cmetric {

enum class ErrorKind {
  StepSizeUnderflow,
  NonFiniteState,
  NoSignChange,
  FieldUndefined,
  NoConvergence,
  SingularShootingJacobian,
  EquilibriumFound,
  NotExponentiallyStable,
  AmbiguousTrivialMultiplier,
  DefectiveStructureUnresolved,
  ComplexPairMismatch,
  KindMismatch,
  InvariantViolation,
  TrivialBlockMissing,
  OutsideChart,
  DegenerateDenominator,
  BranchJump,
  NoDecayDetected,
  NeverReachesLevel,
  OutsideBasin,
  BadInterval,
  SingularF,
  BasisDegenerate,
  CholeskyFail,
  ConfigError,
};

[[nodiscard]] inline const char* to_string(ErrorKind k) noexcept {
  switch (k) {
    case ErrorKind::StepSizeUnderflow: return "StepSizeUnderflow";
    case ErrorKind::NonFiniteState: return "NonFiniteState";
    case ErrorKind::NoSignChange: return "NoSignChange";
    case ErrorKind::FieldUndefined: return "FieldUndefined";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::SingularShootingJacobian: return "SingularShootingJacobian";
    case ErrorKind::EquilibriumFound: return "EquilibriumFound";
    case ErrorKind::NotExponentiallyStable: return "NotExponentiallyStable";
    case ErrorKind::AmbiguousTrivialMultiplier: return "AmbiguousTrivialMultiplier";
    case ErrorKind::DefectiveStructureUnresolved: return "DefectiveStructureUnresolved";
    case ErrorKind::ComplexPairMismatch: return "ComplexPairMismatch";
    case ErrorKind::KindMismatch: return "KindMismatch";
    case ErrorKind::InvariantViolation: return "InvariantViolation";
    case ErrorKind::TrivialBlockMissing: return "TrivialBlockMissing";
    case ErrorKind::OutsideChart: return "OutsideChart";
    case ErrorKind::DegenerateDenominator: return "DegenerateDenominator";
    case ErrorKind::BranchJump: return "BranchJump";
    case ErrorKind::NoDecayDetected: return "NoDecayDetected";
    case ErrorKind::NeverReachesLevel: return "NeverReachesLevel";
    case ErrorKind::OutsideBasin: return "OutsideBasin";
    case ErrorKind::BadInterval: return "BadInterval";
    case ErrorKind::SingularF: return "SingularF";
    case ErrorKind::BasisDegenerate: return "BasisDegenerate";
    case ErrorKind::CholeskyFail: return "CholeskyFail";
    case ErrorKind::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Every failure raised by the library. `residual` is set when a numerical
/// invariant check failed and carries the offending value.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what,
        double residual = std::numeric_limits<double>::quiet_NaN())
      : std::runtime_error(std::string(to_string(kind)) + ": " + what),
        kind_(kind),
        residual_(residual) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }
  [[nodiscard]] double residual() const noexcept { return residual_; }

 private:
  ErrorKind kind_;
  double residual_;
};

}  // namespace cmetric
