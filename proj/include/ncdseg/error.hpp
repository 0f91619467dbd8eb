#pragma once

#include <stdexcept>
#include <string>

namespace ncdseg {

/// Base class for every error raised by the library.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define NCDSEG_DEFINE_ERROR(name)                                \
  struct name : Error {                                          \
    explicit name(const std::string& what) : Error(what) {}      \
  }

// data model / task validation
NCDSEG_DEFINE_ERROR(DisjointnessViolation);
NCDSEG_DEFINE_ERROR(LabelOutOfSplit);
NCDSEG_DEFINE_ERROR(LengthMismatch);

// file I/O
NCDSEG_DEFINE_ERROR(ParseError);
NCDSEG_DEFINE_ERROR(EmptyCloud);
NCDSEG_DEFINE_ERROR(CountMismatch);
NCDSEG_DEFINE_ERROR(UnknownClassName);
NCDSEG_DEFINE_ERROR(IoError);

// network
NCDSEG_DEFINE_ERROR(ShapeMismatch);
NCDSEG_DEFINE_ERROR(TraceMismatch);
NCDSEG_DEFINE_ERROR(NormalizationDegenerate);
NCDSEG_DEFINE_ERROR(CheckpointMismatch);

// sinkhorn
NCDSEG_DEFINE_ERROR(StepOutOfRange);
NCDSEG_DEFINE_ERROR(NumericOverflow);
NCDSEG_DEFINE_ERROR(DegenerateColumn);

// queue / selection
NCDSEG_DEFINE_ERROR(DimensionMismatch);

// losses
NCDSEG_DEFINE_ERROR(EmptyMask);
NCDSEG_DEFINE_ERROR(ZeroFrequency);
NCDSEG_DEFINE_ERROR(ViewMismatch);

// evaluation
NCDSEG_DEFINE_ERROR(IdOutOfRange);

// baselines
NCDSEG_DEFINE_ERROR(NoNovelPoints);
NCDSEG_DEFINE_ERROR(TooFewPoints);
NCDSEG_DEFINE_ERROR(UnknownClass);
NCDSEG_DEFINE_ERROR(ZeroEnsemble);

#undef NCDSEG_DEFINE_ERROR

}  // namespace ncdseg
