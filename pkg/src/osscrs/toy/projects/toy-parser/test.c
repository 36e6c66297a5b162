#include <stdio.h>
#include <string.h>

#include "toy.h"

static int check(const char *input, int want) {
    int got = toy_parse((const unsigned char *)input, strlen(input));
    if (got != want) {
        fprintf(stderr, "FAIL: toy_parse(\"%s\") = %d, want %d\n", input, got, want);
        return 1;
    }
    return 0;
}

int main(void) {
    int failures = 0;
    failures += check("", 1);
    failures += check("a", 1);
    failures += check("a,b,c", 3);
    failures += check("key=value,,", 3);
    failures += check("CRAS,H", 2);
    printf("%s\n", failures ? "tests failed" : "all tests passed");
    return failures != 0;
}
