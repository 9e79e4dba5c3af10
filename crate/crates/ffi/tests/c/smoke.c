#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "axsr.h"

#define CHECK(call)                                                          \
  do {                                                                       \
    AxsrStatus s_ = (call);                                                  \
    if (s_ != AXSR_STATUS_OK) {                                              \
      fprintf(stderr, "%s: %s (%s)\n", #call, axsr_status_name(s_),          \
              axsr_last_error());                                            \
      return 1;                                                              \
    }                                                                        \
  } while (0)

int main(int argc, char **argv) {
  if (argc != 2) {
    fprintf(stderr, "usage: smoke MODEL\n");
    return 2;
  }
  AxsrModel *model = NULL;
  CHECK(axsr_model_load(argv[1], &model));

  size_t d = 5, h = 32, w = 32;
  double *vox = malloc(d * h * w * sizeof(double));
  for (size_t i = 0; i < d * h * w; i++) vox[i] = (double)(i % 251);
  AxsrStack *in = NULL, *out = NULL;
  CHECK(axsr_stack_new(d, h, w, 8, vox, &in));
  CHECK(axsr_double_stack(model, in, 2, &out));
  size_t od, oh, ow;
  CHECK(axsr_stack_dims(out, &od, &oh, &ow));

  AxsrStack *bad = NULL;
  AxsrStatus s = axsr_stack_new(d, h, w, 12, vox, &bad);
  if (s != AXSR_STATUS_INVALID_ARGUMENT || strlen(axsr_last_error()) == 0) return 3;

  printf("depth %zu psnr %.2f version %s\n", od, axsr_psnr_from_rmse(16.68),
         axsr_version());
  axsr_stack_free(out);
  axsr_stack_free(in);
  axsr_model_free(model);
  free(vox);
  return od == 17 ? 0 : 4;
}
