#include "towerphys/error.hpp"

namespace towerphys {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid argument";
    case ErrorKind::shape_mismatch: return "shape mismatch";
    case ErrorKind::numerical: return "numerical error";
    case ErrorKind::divergence: return "training divergence";
    case ErrorKind::format: return "format error";
    case ErrorKind::io: return "I/O error";
    case ErrorKind::quota_unreachable: return "quota unreachable";
  }
  return "unknown error";
}

}  // namespace towerphys
