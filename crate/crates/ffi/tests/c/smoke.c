#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "chela.h"

#define CHECK(call, want)                                                          \
    do {                                                                           \
        ChelaStatus s_ = (call);                                                   \
        if (s_ != (want)) {                                                        \
            const char *e_ = chela_last_error();                                   \
            fprintf(stderr, "%s:%d: got %d want %d (%s)\n", __FILE__, __LINE__,    \
                    (int)s_, (int)(want), e_ ? e_ : "no message");                 \
            return 1;                                                              \
        }                                                                          \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke CHECKPOINT\n");
        return 2;
    }
    const char *cfg = "{\"depth\":2,\"d_model\":8,\"max_len\":32,\"vocab_size\":6,"
                      "\"task_head\":\"lm\",\"mixer\":\"shortlong\",\"seed\":1}";
    ChelaModel *m = NULL;
    CHECK(chela_model_create(cfg, &m), CHELA_STATUS_OK);

    uint32_t ids[6] = {0, 1, 2, 3, 4, 5};
    size_t n = 0;
    CHECK(chela_model_output_len(m, 2, 3, &n), CHELA_STATUS_OK);
    if (n != 2 * 3 * 6) return 1;
    double *y = malloc(n * sizeof(double));
    double *z = malloc(n * sizeof(double));
    CHECK(chela_model_forward_tokens(m, ids, 2, 3, y, n), CHELA_STATUS_OK);
    CHECK(chela_model_forward_tokens(m, ids, 2, 3, y, n - 1), CHELA_STATUS_BUFFER_TOO_SMALL);
    CHECK(chela_model_save(m, argv[1]), CHELA_STATUS_OK);

    ChelaModel *l = NULL;
    CHECK(chela_model_load(argv[1], &l), CHELA_STATUS_OK);
    CHECK(chela_model_forward_tokens(l, ids, 2, 3, z, n), CHELA_STATUS_OK);
    if (memcmp(y, z, n * sizeof(double)) != 0) {
        fprintf(stderr, "reloaded model differs\n");
        return 1;
    }

    ChelaModel *bad = NULL;
    CHECK(chela_model_create("{", &bad), CHELA_STATUS_JSON);
    CHECK(chela_model_create(NULL, &bad), CHELA_STATUS_NULL_POINTER);

    printf("chela %s ok params=%zu\n", chela_version(), chela_model_param_count(m));
    chela_model_free(m);
    chela_model_free(l);
    free(y);
    free(z);
    return 0;
}
