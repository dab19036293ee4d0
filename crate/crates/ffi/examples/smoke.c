/* Leaks one byte through the store buffer and recovers an AES key schedule.
 *
 *   cargo build -p falloutsim-ffi
 *   cc -Icrates/ffi/include crates/ffi/examples/smoke.c \
 *      target/debug/libfalloutsim_ffi.a -lpthread -ldl -lm -o smoke
 */
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "falloutsim.h"

static int check(FsStatus status, const char *what) {
    if (status != FS_STATUS_OK) {
        const char *msg = fs_last_error_message();
        fprintf(stderr, "%s: status %d: %s\n", what, (int)status, msg ? msg : "?");
        return 1;
    }
    return 0;
}

int main(void) {
    FsProfile *profile = NULL;
    FsSimulator *sim = NULL;
    FsReport *report = NULL;
    FsExecStats stats;
    int hit = -1;

    if (check(fs_profile_resolve("kabylake", &profile), "profile")) return 1;
    if (check(fs_simulator_new(profile, 1, false, &sim), "simulator")) return 1;
    if (check(fs_simulator_prime_probe(sim), "prime")) return 1;
    if (check(fs_simulator_run(sim,
                               "store 0x10007 42\n"
                               "tsx_begin\n"
                               "load 0x80010007 r0\n"
                               "probe 0x100000 r0\n"
                               "tsx_end\n",
                               &stats),
              "run"))
        return 1;
    if (check(fs_simulator_read_probe(sim, 150, NULL, &hit), "probe")) return 1;
    printf("leaked byte %d, aborted transactions %llu\n", hit, (unsigned long long)stats.aborted_transactions);

    const FsProfile *profiles[1] = {profile};
    if (check(fs_scenario_run("toy", profiles, 1, 7, 0, "value=99", &report), "scenario")) return 1;
    size_t needed = 0;
    fs_report_summary(report, "recovered", NULL, 0, &needed);
    char *value = malloc(needed);
    if (check(fs_report_summary(report, "recovered", value, needed, NULL), "summary")) return 1;
    printf("toy scenario recovered %s\n", value);

    uint8_t key[16] = {0}, schedule[176], master[16];
    for (int i = 0; i < 16; i++) key[i] = (uint8_t)i;
    if (check(fs_aes_expand_key(key, schedule), "expand")) return 1;
    if (check(fs_aes_reverse_key_schedule(schedule + 160, schedule + 144, master), "reverse")) return 1;
    printf("key schedule round trip %s\n", memcmp(key, master, 16) == 0 ? "ok" : "BROKEN");

    int ok = hit == 42 && strcmp(value, "99") == 0 && memcmp(key, master, 16) == 0;
    free(value);
    fs_report_free(report);
    fs_simulator_free(sim);
    fs_profile_free(profile);
    return ok ? 0 : 1;
}
