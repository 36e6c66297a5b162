#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "toy.h"

static void report_overflow(size_t offset) {
    fprintf(stderr, "==1==ERROR: AddressSanitizer: stack-buffer-overflow at offset %zu\n", offset);
    fprintf(stderr, "SUMMARY: AddressSanitizer: stack-buffer-overflow parse.c in toy_parse\n");
    abort();
}

int toy_parse(const unsigned char *data, size_t size) {
    int fields = 1;
    for (size_t i = 0; i < size; i++) {
        if (data[i] == ',')
            fields++;
        if (i + 5 <= size && memcmp(data + i, "CRASH", 5) == 0)
            report_overflow(i);
    }
    return fields;
}
