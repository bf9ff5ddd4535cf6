#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

#include <Eigen/Dense>

namespace seqvar {

// What a stream is used for. Distinct purposes never share draws.
enum class Purpose : std::uint32_t {
  kSimulateState = 1,
  kSimulateObs = 2,
  kParticles = 3,
  kBackward = 4,
  kInit = 5,
  kReplicate = 6,
  kModelParams = 7,
  kTest = 8,
};

struct StreamKey {
  std::uint64_t master = 0;
  Purpose purpose = Purpose::kTest;
  std::uint64_t t = 0;
  std::uint64_t i = 0;
};

// Counter-based random stream (Philox4x32-10). The key fully determines the
// sequence, so streams can be created anywhere, in any order, on any thread.
class Stream {
 public:
  explicit Stream(const StreamKey& key);
  Stream(std::uint64_t master, Purpose purpose, std::uint64_t t = 0, std::uint64_t i = 0)
      : Stream(StreamKey{master, purpose, t, i}) {}

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  // Uniform on the open interval (0, 1), 53 bits of resolution.
  double uniform();
  double normal();
  Eigen::VectorXd normal_vector(Eigen::Index d);
  // Gamma(shape, 1) by Marsaglia-Tsang.
  double gamma(double shape);
  double student_t(double dof);
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);

 private:
  void refill();

  std::array<std::uint32_t, 2> key_{};
  std::array<std::uint32_t, 4> counter_{};
  std::array<std::uint32_t, 4> buffer_{};
  int used_ = 4;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

// Standard-normal CDF, used by tests and diagnostics.
double normal_cdf(double x);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace seqvar
