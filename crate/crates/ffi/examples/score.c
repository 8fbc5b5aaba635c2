/* cc -Iinclude examples/score.c -L../../target/release -lattnback_ffi -lm -o score */
#include <stdio.h>
#include "attnback.h"

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: %s MODEL\n", argv[0]);
        return 2;
    }
    AtbAttentionModel *model = NULL;
    if (atb_attention_load(argv[1], &model) != ATB_STATUS_OK) {
        fprintf(stderr, "load: %s\n", atb_last_error());
        return 1;
    }
    size_t dim = atb_attention_dim(model);
    double enroll[2 * 256] = {0};
    double test[256] = {0};
    if (dim > 256) {
        atb_attention_free(model);
        return 1;
    }
    for (size_t i = 0; i < dim; i++) {
        enroll[i] = 1.0;
        enroll[dim + i] = (double)(i % 3);
        test[i] = 1.0 + 0.1 * (double)i;
    }
    double p = 0.0;
    AtbStatus st = atb_attention_score(model, enroll, 2, test, dim, &p);
    if (st != ATB_STATUS_OK) {
        fprintf(stderr, "score: %s\n", atb_last_error());
        atb_attention_free(model);
        return 1;
    }
    printf("%.6f\n", p);
    atb_attention_free(model);
    return 0;
}
