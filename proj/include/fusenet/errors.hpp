#pragma once

#include <stdexcept>
#include <string>

namespace fusenet {

// Error codes shared across the pipeline. CLI prints them as
// machine-readable lines, tests match on them.
enum class Errc {
  BadMagic,
  HeaderMismatch,
  UnsupportedDtype,
  IoFailure,
  ShapeMismatch,
  TargetSmaller,
  EmptyVolume,
  DegenerateWindow,
  BadLabel,
  NoForeground,
  EmptyDataset,
  EmptyMask,
  FrozenViolation,
  BadFractions,
  DegenerateLabels,
  MissingPredictions,
  BadGeometry,
  BadConfig,
  UsageError,
  MissingArtifacts,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::BadMagic: return "BadMagic";
    case Errc::HeaderMismatch: return "HeaderMismatch";
    case Errc::UnsupportedDtype: return "UnsupportedDtype";
    case Errc::IoFailure: return "IoFailure";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::TargetSmaller: return "TargetSmaller";
    case Errc::EmptyVolume: return "EmptyVolume";
    case Errc::DegenerateWindow: return "DegenerateWindow";
    case Errc::BadLabel: return "BadLabel";
    case Errc::NoForeground: return "NoForeground";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::FrozenViolation: return "FrozenViolation";
    case Errc::BadFractions: return "BadFractions";
    case Errc::DegenerateLabels: return "DegenerateLabels";
    case Errc::MissingPredictions: return "MissingPredictions";
    case Errc::BadGeometry: return "BadGeometry";
    case Errc::BadConfig: return "BadConfig";
    case Errc::UsageError: return "UsageError";
    case Errc::MissingArtifacts: return "MissingArtifacts";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}

  Errc code() const { return code_; }
  const char* code_name() const { return errc_name(code_); }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& msg) { throw Error(code, msg); }

}  // namespace fusenet
