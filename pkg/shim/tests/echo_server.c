/* Plain TCP echo server used as an unmodified test workload.
 *
 * Binds the given port (0 for kernel-assigned), prints
 * "READY <port> reuseport=<0|1>" once listening, echoes a single
 * connection until EOF, then exits 0.  The reuseport flag is queried
 * after bind so tests can observe whether a preloaded interposer
 * touched the socket.
 */
#include <arpa/inet.h>
#include <errno.h>
#include <netinet/in.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/socket.h>
#include <unistd.h>

static int write_all(int fd, const char *buf, size_t n)
{
    while (n > 0) {
        ssize_t w = write(fd, buf, n);
        if (w < 0) {
            if (errno == EINTR)
                continue;
            return -1;
        }
        buf += w;
        n -= (size_t)w;
    }
    return 0;
}

int main(int argc, char **argv)
{
    struct sockaddr_in addr;
    socklen_t alen = sizeof addr;
    int fd, conn, flag = 0;
    socklen_t flen = sizeof flag;
    char buf[65536];
    ssize_t n;

    if (argc != 2) {
        fprintf(stderr, "usage: echo_server PORT\n");
        return 2;
    }
    fd = socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0)
        return 2;
    memset(&addr, 0, sizeof addr);
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons((unsigned short)atoi(argv[1]));
    if (bind(fd, (struct sockaddr *)&addr, sizeof addr) != 0) {
        printf("BIND_ERRNO %d\n", errno);
        fflush(stdout);
        return 3;
    }
    getsockopt(fd, SOL_SOCKET, SO_REUSEPORT, &flag, &flen);
    if (getsockname(fd, (struct sockaddr *)&addr, &alen) != 0)
        return 2;
    if (listen(fd, 8) != 0)
        return 2;
    printf("READY %d reuseport=%d\n", ntohs(addr.sin_port), flag);
    fflush(stdout);

    conn = accept(fd, NULL, NULL);
    if (conn < 0)
        return 4;
    while ((n = read(conn, buf, sizeof buf)) > 0)
        if (write_all(conn, buf, (size_t)n) != 0)
            return 5;
    close(conn);
    printf("DONE\n");
    return 0;
}
