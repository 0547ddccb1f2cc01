#include <stdio.h>
#include <string.h>

#include "mts.h"

static const char *SPEC =
    "{\"version\":1,"
    "\"tenants\":[{\"id\":\"a\",\"vm_count\":1,\"ip_block\":\"10.1.0.0/24\"},"
    "{\"id\":\"b\",\"vm_count\":1,\"ip_block\":\"10.2.0.0/24\"}],"
    "\"level\":{\"kind\":\"level1\"},\"mode\":\"isolated\",\"fabric_ports\":1,"
    "\"external_gw_mac\":\"02:ee:00:00:00:01\"}";

int main(void) {
    MtsPlan *plan = NULL;
    if (mts_plan_from_json(SPEC, &plan) != MTS_STATUS_OK) {
        fprintf(stderr, "plan: %s\n", mts_last_error());
        return 1;
    }
    int32_t passed = 0;
    uint64_t violations = 1;
    char *metrics = NULL;
    if (mts_golden_check(plan, &passed) != MTS_STATUS_OK || !passed) return 2;
    if (mts_verify_isolation(plan, 200, 1, &violations, NULL) != MTS_STATUS_OK || violations) return 3;
    if (mts_run_scenario(plan, "v2v", 3, 1, &metrics) != MTS_STATUS_OK) return 4;
    int ok = strstr(metrics, "\"delivered\": 3") != NULL;
    mts_string_free(metrics);
    if (mts_compromise(plan, "nope", &metrics) != MTS_STATUS_INVALID_ARGUMENT) return 5;
    mts_plan_free(plan);
    printf("smoke %s\n", ok ? "ok" : "bad");
    return ok ? 0 : 6;
}
