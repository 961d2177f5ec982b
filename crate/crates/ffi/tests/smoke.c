#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "fsdet.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke CHECKPOINT\n");
        return 2;
    }
    FsdetDetector *det = NULL;
    if (fsdet_detector_load(argv[1], &det) != FSDET_STATUS_OK) {
        fprintf(stderr, "load: %s\n", fsdet_last_error());
        return 1;
    }
    uint32_t w = 0, h = 0;
    fsdet_detector_input_size(det, &w, &h);
    printf("fsdet %s, classes %u, input %ux%u\n", fsdet_version(), fsdet_detector_num_classes(det), w, h);

    size_t bytes = (size_t)w * h * 3;
    uint8_t *rgb = malloc(bytes);
    memset(rgb, 96, bytes);
    FsdetDetection dets[8];
    size_t n = 0;
    FsdetDetectOptions opts = fsdet_detect_options_default();
    opts.score_threshold = 0.0;
    FsdetStatus s = fsdet_detect(det, rgb, w, h, &opts, dets, 8, &n);
    free(rgb);
    if (s != FSDET_STATUS_OK) {
        fprintf(stderr, "detect: %s\n", fsdet_last_error());
        fsdet_detector_free(det);
        return 1;
    }
    for (size_t i = 0; i < n && i < 8; i++) {
        printf("%s %.3f [%.1f %.1f %.1f %.1f]\n", fsdet_detector_class_name(det, dets[i].class_index), dets[i].score,
               dets[i].x1, dets[i].y1, dets[i].x2, dets[i].y2);
    }
    if (fsdet_detect(det, NULL, w, h, NULL, NULL, 0, &n) != FSDET_STATUS_NULL_ARGUMENT) {
        fprintf(stderr, "expected a NULL-argument status\n");
        return 1;
    }
    fsdet_detector_free(det);
    return 0;
}
