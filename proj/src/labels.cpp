#include "cmri/labels.hpp"

#include "cmri/error.hpp"

namespace cmri {

std::string_view to_string(Sequence s) {
  switch (s) {
    case Sequence::AXFLAIR: return "AXFLAIR";
    case Sequence::AXT1: return "AXT1";
    case Sequence::AXT1POST: return "AXT1POST";
    case Sequence::AXT1PRE: return "AXT1PRE";
    case Sequence::AXT2: return "AXT2";
    case Sequence::Null: return "NULL_SEQ";
  }
  return "?";
}

std::string_view to_string(Abnormality a) {
  switch (a) {
    case Abnormality::Normal: return "normal";
    case Abnormality::Abnormal: return "abnormal";
    case Abnormality::Unknown: return "unknown";
    case Abnormality::Null: return "NULL_PATH";
  }
  return "?";
}

std::string_view to_string(VolumeClass c) {
  switch (c) {
    case VolumeClass::Normal: return "normal";
    case VolumeClass::Abnormal: return "abnormal";
    case VolumeClass::Unlabeled: return "unlabeled";
  }
  return "?";
}

Sequence parse_sequence(std::string_view name) {
  for (Sequence s : kAllSequences) {
    if (to_string(s) == name) return s;
  }
  if (name == "NULL_SEQ") return Sequence::Null;
  throw ValidationError("unknown sequence '" + std::string(name) + "'");
}

Abnormality parse_abnormality(std::string_view name) {
  for (Abnormality a : {Abnormality::Normal, Abnormality::Abnormal, Abnormality::Unknown, Abnormality::Null}) {
    if (to_string(a) == name) return a;
  }
  throw ValidationError("unknown abnormality '" + std::string(name) + "'");
}

VolumeClass parse_volume_class(std::string_view name) {
  for (VolumeClass c : {VolumeClass::Normal, VolumeClass::Abnormal, VolumeClass::Unlabeled}) {
    if (to_string(c) == name) return c;
  }
  throw ValidationError("unknown volume class '" + std::string(name) + "'");
}

}  // namespace cmri
