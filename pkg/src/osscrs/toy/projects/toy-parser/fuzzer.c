/* libFuzzer-style harness: runs each file named on the command line. */
#include <stdio.h>
#include <stdlib.h>

#include "toy.h"

int LLVMFuzzerTestOneInput(const unsigned char *data, size_t size) {
    toy_parse(data, size);
    return 0;
}

static int run_file(const char *path) {
    FILE *f = fopen(path, "rb");
    if (!f) {
        fprintf(stderr, "cannot open %s\n", path);
        return 1;
    }
    unsigned char buf[65536];
    size_t n = fread(buf, 1, sizeof buf, f);
    fclose(f);
    LLVMFuzzerTestOneInput(buf, n);
    return 0;
}

int main(int argc, char **argv) {
    int failed = 0;
    for (int i = 1; i < argc; i++) {
        fprintf(stderr, "Running: %s\n", argv[i]);
        failed |= run_file(argv[i]);
    }
    fprintf(stderr, "Executed %d inputs\n", argc - 1);
    return failed;
}
