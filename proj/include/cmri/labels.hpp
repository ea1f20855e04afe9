#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace cmri {

// Acquisition sequences. Null is the dropped-condition token.
enum class Sequence : std::int32_t { AXFLAIR = 0, AXT1, AXT1POST, AXT1PRE, AXT2, Null };
inline constexpr int kSequenceCount = 5;
inline constexpr std::array<Sequence, kSequenceCount> kAllSequences = {
    Sequence::AXFLAIR, Sequence::AXT1, Sequence::AXT1POST, Sequence::AXT1PRE, Sequence::AXT2};

enum class Abnormality : std::int32_t { Normal = 0, Abnormal, Unknown, Null };
inline constexpr int kAbnormalityTokens = 4;

enum class VolumeClass : std::int32_t { Normal = 0, Abnormal, Unlabeled };

struct ConditionLabel {
  Sequence sequence = Sequence::Null;
  Abnormality abnormality = Abnormality::Null;

  friend bool operator==(const ConditionLabel&, const ConditionLabel&) = default;
};

std::string_view to_string(Sequence s);
std::string_view to_string(Abnormality a);
std::string_view to_string(VolumeClass c);

// Throw ValidationError on unknown names.
Sequence parse_sequence(std::string_view name);
Abnormality parse_abnormality(std::string_view name);
VolumeClass parse_volume_class(std::string_view name);

// Patch-level label for a volume class: unlabeled volumes carry the unknown token.
inline Abnormality default_abnormality(VolumeClass c) {
  switch (c) {
    case VolumeClass::Normal: return Abnormality::Normal;
    case VolumeClass::Abnormal: return Abnormality::Abnormal;
    case VolumeClass::Unlabeled: return Abnormality::Unknown;
  }
  return Abnormality::Unknown;
}

}  // namespace cmri
