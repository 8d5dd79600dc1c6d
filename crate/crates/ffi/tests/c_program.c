#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "dscl.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        enum DsclStatus s_ = (call);                                       \
        if (s_ != DSCL_STATUS_OK) {                                        \
            const char *m_ = dscl_last_error_message();                    \
            fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,        \
                    m_ ? m_ : "?");                                        \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    uint64_t fe = 0;
    CHECK(dscl_fe_param_count("ds", "{\"input_size\": 224}", &fe));
    if (fe != 12572672u) {
        fprintf(stderr, "ds count %llu\n", (unsigned long long)fe);
        return 1;
    }
    if (dscl_fe_param_count("nope", NULL, &fe) != DSCL_STATUS_CONFIG ||
        dscl_last_error_message() == NULL) {
        fprintf(stderr, "expected a config error\n");
        return 1;
    }

    DsclDataset *train = NULL, *test = NULL;
    CHECK(dscl_dataset_fig1(32, 2, 5, &train, &test));
    size_t n, classes, size;
    CHECK(dscl_dataset_info(test, &n, &classes, &size));

    const char *cfg = "{\"input_size\": 32, \"width_mult\": 0.0625, \"head_channels\": 8}";
    size_t heads[2] = {2, 2};
    DsclModel *model = NULL;
    CHECK(dscl_model_new("resnet18h", cfg, heads, 2, 0, &model));
    float logits[4];
    CHECK(dscl_model_predict(model, dscl_dataset_images(test), 2, 0, logits, 4));
    for (int i = 0; i < 4; i++) {
        if (!isfinite(logits[i])) {
            fprintf(stderr, "non-finite logit\n");
            return 1;
        }
    }

    double m[4] = {80.0, 0.0, 60.0, 70.0};
    double acc, forg;
    CHECK(dscl_metrics(m, 2, &acc, &forg));
    if (acc != 65.0 || forg != -20.0) {
        fprintf(stderr, "metrics %f %f\n", acc, forg);
        return 1;
    }

    dscl_model_free(model);
    dscl_dataset_free(train);
    dscl_dataset_free(test);
    printf("ok %s\n", dscl_version());
    return 0;
}
