#include "xferlab/rng.hpp"

#include <Eigen/LU>
#include <Eigen/QR>

namespace xferlab {

Eigen::MatrixXd SplitRng::rotation_matrix(Eigen::Index d) {
  Eigen::MatrixXd g = normal_matrix(d, d);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < d; ++i) {
    if (r(i, i) < 0.0) q.col(i) = -q.col(i);
  }
  // Proper rotation (det +1): flip one column if the QR gave a reflection.
  if (q.determinant() < 0.0) q.col(0) = -q.col(0);
  return q;
}

}  // namespace xferlab
