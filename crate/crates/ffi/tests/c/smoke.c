#include <math.h>
#include <stdio.h>
#include "symcorr.h"

int main(void) {
    const double w[4] = {1.0, 0.5, -0.25, 2.0};
    const double b[2] = {0.1, -0.1};
    const double query[6] = {1.0, 0.0, 0.0, 1.0, 0.5, 0.5};
    const double supports[8] = {1.0, 0.0, 0.0, 1.0, -1.0, 0.2, 0.3, 0.3};
    const size_t counts[2] = {1, 3};
    SymcorrProjector *p = NULL;
    SymcorrAttention *a = NULL;
    double values[12];
    double delta[2];
    double dev = 0.0;
    size_t rows = 0, cols = 0;

    if (symcorr_projector_warm_start(2, w, b, &p) != SYMCORR_STATUS_OK) return 1;
    if (symcorr_symmetric_attention(p, query, 3, supports, counts, 2, 2, SYMCORR_SCALE_SQRT_D, &a)
        != SYMCORR_STATUS_OK) return 2;
    if (symcorr_attention_shape(a, &rows, &cols) != SYMCORR_STATUS_OK || rows != 3 || cols != 4) return 3;
    if (symcorr_attention_values(a, values, 12) != SYMCORR_STATUS_OK) return 4;
    for (size_t r = 0; r < rows; r++) {
        double sum = 0.0;
        for (size_t c = 0; c < cols; c++) sum += values[r * cols + c];
        if (fabs(sum - 1.0) > 1e-12) return 5;
    }
    if (symcorr_contribution_index(a, delta, 2) != SYMCORR_STATUS_OK) return 6;
    if (symcorr_deviation(a, 0, &dev) != SYMCORR_STATUS_OK || fabs(dev - (delta[0] - delta[1])) > 1e-15) return 7;
    if (symcorr_deviation(a, 5, &dev) != SYMCORR_STATUS_CONTRACT) return 8;
    if (symcorr_last_error_message()[0] == '\0') return 9;
    symcorr_attention_free(a);
    symcorr_projector_free(p);
    printf("delta %.6f %.6f\n", delta[0], delta[1]);
    return 0;
}
