#ifndef TOY_H
#define TOY_H
#include <stddef.h>

/* Count comma-separated fields in a record; -1 for a rejected record. */
int toy_parse(const unsigned char *data, size_t size);

#endif
