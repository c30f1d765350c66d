/* End-to-end drive of the C API. Run from the repo root after `pban train`
 * has written /tmp/verify.ckpt (see .claude/skills/verify/SKILL.md).
 * Exits 0 only if scoring works and the error paths return the documented
 * statuses. */
#include <stdio.h>
#include "pban.h"

#define SR0 "crates/pban-core/tests/fixtures/sr_0.ppm"
#define HR0 "crates/pban-core/tests/fixtures/hr_0.ppm"

int main(void) {
    PbanModel *m = NULL;
    int rc = pban_model_load("/tmp/verify.ckpt", &m);
    if (rc != PBAN_STATUS_OK) {
        fprintf(stderr, "load failed (%d): %s\n", rc, pban_last_error());
        return 1;
    }
    double score = 0.0;
    rc = pban_score_paths(m, SR0, HR0, &score);
    if (rc != PBAN_STATUS_OK) {
        fprintf(stderr, "score failed (%d): %s\n", rc, pban_last_error());
        return 1;
    }
    printf("paths score: %.16f\n", score);

    rc = pban_score_paths(m, "/tmp/doesnotexist.ppm", HR0, &score);
    printf("missing file status: %d (%s)\n", rc, pban_last_error());
    if (rc != PBAN_STATUS_DATA) return 1;

    rc = pban_score_paths(m, NULL, HR0, &score);
    printf("null arg status: %d\n", rc);
    if (rc != PBAN_STATUS_USAGE) return 1;

    pban_model_free(m);
    pban_model_free(NULL); /* documented no-op */
    return 0;
}
