#include "tc/tensor.hpp"

namespace tc {

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) out(c, r) = m(r, c);
    return out;
}

} // namespace tc
