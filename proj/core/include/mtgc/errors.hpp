#pragma once

#include <stdexcept>
#include <string>

namespace mtgc {

// Base for every domain error. Each concrete class maps to one documented
// CLI exit code (see tools/).
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// guidance_text
struct MissingFixtureCaption : Error { using Error::Error; };
struct CaptionTooLong : Error { using Error::Error; };
struct CorruptCaptionPayload : Error { using Error::Error; };

// hci_codec
struct NonFiniteLoss : Error { using Error::Error; };
struct ShapeNotDivisible : Error { using Error::Error; };
struct UntrainedCodec : Error { using Error::Error; };
struct CorruptHciBitstream : Error { using Error::Error; };

// tascm
struct BackboneNotLoaded : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };
struct CorruptSpwPayload : Error { using Error::Error; };

// fusion
struct CaptionOverflow : Error { using Error::Error; };
struct SpwCountMismatch : Error { using Error::Error; };
struct TextEncoderNotLoaded : Error { using Error::Error; };

// mgdd
struct TimestepOutOfRange : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct InvalidSteps : Error { using Error::Error; };

// training
struct MissingPrerequisiteCheckpoint : Error { using Error::Error; };

// container
struct SectionTooLarge : Error { using Error::Error; };
struct BadMagic : Error { using Error::Error; };
struct VersionUnsupported : Error { using Error::Error; };
struct CrcMismatch : Error { using Error::Error; };
struct TruncatedContainer : Error { using Error::Error; };

// eval
struct NotEnoughPoints : Error { using Error::Error; };

// generic I/O
struct IoError : Error { using Error::Error; };

}  // namespace mtgc
