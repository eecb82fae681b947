#include <stdio.h>
#include <string.h>
#include <math.h>
#include "narrablend.h"

#define CHECK(expr)                                                          \
  do {                                                                       \
    NbStatus st_ = (expr);                                                   \
    if (st_ != NB_STATUS_OK) {                                               \
      const char *m_ = nb_last_error_message();                              \
      fprintf(stderr, "%s -> %d (%s)\n", #expr, (int)st_, m_ ? m_ : "-");    \
      return 1;                                                              \
    }                                                                        \
  } while (0)

static const char SCRIPT[] =
    "{\"story_id\":\"c\",\"segments\":["
    "{\"scene\":\"a quiet street\",\"action\":\"a man walking\"},"
    "{\"scene\":\"a quiet street\",\"action\":\"a man running\"}]}";

int main(void) {
  NbConfig *cfg = NULL;
  NbScript *script = NULL;
  NbRun *run = NULL;
  double as = 0, aa = 0, disc = 0;
  size_t needed = 0;

  CHECK(nb_config_default(&cfg));
  CHECK(nb_config_set_steps(cfg, 8));
  CHECK(nb_config_set_seed(cfg, 5));
  CHECK(nb_script_parse((const uint8_t *)SCRIPT, strlen(SCRIPT), &script));
  CHECK(nb_generate(cfg, script, &run));

  if (nb_run_segment_count(run) != 2 || nb_run_step_count(run, 1) != 8) return 2;
  CHECK(nb_run_weights(run, 2, 8, &as, &aa));
  if (fabs(as + aa - 1.0) > 1e-12) return 3;
  CHECK(nb_run_boundary_discontinuity(run, 0, &disc));

  if (nb_run_latents(run, 1, NULL, 0, &needed) != NB_STATUS_BUFFER_TOO_SMALL || needed == 0) return 4;
  if (nb_run_weights(run, 3, 1, &as, &aa) != NB_STATUS_OUT_OF_RANGE) return 5;
  if (nb_last_error_message() == NULL) return 6;

  char *json = NULL;
  CHECK(nb_run_metrics_json(run, &json));
  if (strstr(json, "boundary_discontinuity") == NULL) return 7;
  nb_string_free(json);

  printf("version=%s segments=%zu values=%zu alpha_scene=%.6f disc=%.6f\n", nb_version(),
         nb_run_segment_count(run), needed, as, disc);

  nb_run_free(run);
  nb_script_free(script);
  nb_config_free(cfg);
  return 0;
}
