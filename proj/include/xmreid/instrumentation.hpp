#pragma once

#include <atomic>

namespace xmreid::instrumentation {

// Call counts for the training-only subsystems. Inference must leave these
// untouched.
struct Counters {
  std::atomic<long> wavelet{0};
  std::atomic<long> chpe{0};
  std::atomic<long> protobank{0};

  void reset() {
    wavelet = 0;
    chpe = 0;
    protobank = 0;
  }
};

inline Counters& counters() {
  static Counters c;
  return c;
}

}  // namespace xmreid::instrumentation
