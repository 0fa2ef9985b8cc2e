#include <stdio.h>
#include <string.h>
#include "ecb.h"

#define CHECK(call)                                                           \
    do {                                                                      \
        EcbStatus st_ = (call);                                               \
        if (st_ != ECB_STATUS_OK) {                                           \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)st_,                \
                    ecb_last_error() ? ecb_last_error() : "(none)");          \
            return 1;                                                         \
        }                                                                     \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke CHECKPOINT\n");
        return 2;
    }
    EcbConfigHandle *cfg = NULL;
    CHECK(ecb_config_new_default(&cfg));
    CHECK(ecb_config_set(cfg, "warmup_iters", "4"));
    CHECK(ecb_config_set(cfg, "train_iters", "4"));
    CHECK(ecb_config_set(cfg, "batch_size", "8"));
    if (ecb_config_set(cfg, "bogus", "1") != ECB_STATUS_CONFIG) return 3;

    EcbDatasetHandle *ds = NULL;
    CHECK(ecb_dataset_generate(7, 5, 60, 120, "default", 1, &ds));

    EcbSessionHandle *s = NULL;
    CHECK(ecb_session_new(cfg, ds, &s));
    size_t done = 0;
    CHECK(ecb_session_step(s, 1000, &done));
    bool finished = false;
    CHECK(ecb_session_progress(s, NULL, &finished));
    if (done != 8 || !finished) return 4;
    double acc = -1.0;
    CHECK(ecb_session_target_accuracy(s, ECB_BRANCH_CNN, &acc));
    CHECK(ecb_session_save_checkpoint(s, argv[1]));
    ecb_session_free(s);

    EcbModelHandle *m = NULL;
    CHECK(ecb_model_load(argv[1], &m));
    double reloaded = -1.0;
    CHECK(ecb_model_target_accuracy(m, ds, ECB_BRANCH_CNN, &reloaded));
    if (reloaded != acc) return 5;

    double images[2 * 256];
    for (int i = 0; i < 2 * 256; i++) images[i] = (i % 17) / 16.0;
    size_t labels[2] = {99, 99};
    CHECK(ecb_model_predict(m, images, 2, labels));
    if (labels[0] >= 5 || labels[1] >= 5) return 6;

    printf("ecb %s accuracy %.2f labels %zu %zu\n", ecb_version(), acc, labels[0], labels[1]);
    ecb_model_free(m);
    ecb_dataset_free(ds);
    ecb_config_free(cfg);
    return 0;
}
