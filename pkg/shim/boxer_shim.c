/* boxer_shim.c -- LD_PRELOAD interposer routing TCP connection setup
 * through the local overlay broker.
 *
 * The library exports exactly two symbols, `connect` and `bind`.  On the
 * first intercepted call it resolves the default implementations with
 * dlsym(RTLD_NEXT), connects to the broker's local socket named by
 * BOXER_IPC, and reads BOXER_PEERS_FILE to learn which addresses belong
 * to the overlay.  If BOXER_IPC is unset or unreachable the shim disables
 * itself and every call falls through to libc untouched.
 *
 *   connect(fd, addr):  non-TCP or non-overlay destination -> passthrough.
 *                       Otherwise the socket is bound (kernel-assigned port
 *                       if the application did not bind), a setup request
 *                       goes to the broker, and on acknowledgement the real
 *                       connect runs.  "Unknown destination" also dials
 *                       natively; any other broker error surfaces as
 *                       ECONNREFUSED.
 *
 *   bind(fd, addr):     TCP sockets get SO_REUSEPORT (so the broker can
 *                       share the port while punching), then the real bind
 *                       runs and the bound endpoint is registered with the
 *                       broker.  The registration lives as long as this
 *                       process's broker connection.
 *
 * After establishment the shim is out of the picture: reads and writes go
 * straight to libc with no added system calls.
 */

#define _GNU_SOURCE

#include <arpa/inet.h>
#include <dlfcn.h>
#include <errno.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <pthread.h>
#include <stdarg.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

/* Control wire: [u32 BE payload length][u8 tag][payload]; an endpoint is
 * 4 address bytes + 2 port bytes, both straight from the sockaddr (already
 * network order). */
#define TAG_NAT_SETUP_REQ 0x07
#define TAG_NAT_SETUP_ACK 0x08
#define TAG_NAT_SETUP_ERR 0x09
#define TAG_REGISTER_LISTENER 0x0B

#define ERR_UNKNOWN_DESTINATION 3

typedef int (*connect_fn)(int, const struct sockaddr *, socklen_t);
typedef int (*bind_fn)(int, const struct sockaddr *, socklen_t);

static struct {
    connect_fn real_connect;
    bind_fn real_bind;
    int ipc_fd;                 /* -1: shim inactive, pure passthrough */
    int log_fd;
    uint64_t req_seq;
    pthread_mutex_t ipc_mu;     /* one broker request at a time */
    char peers_path[4096];
    uint32_t *member_ips;       /* network byte order, deduplicated */
    size_t n_members, cap_members;
    pthread_mutex_t members_mu;
} G = {
    .ipc_fd = -1,
    .log_fd = -1,
    .ipc_mu = PTHREAD_MUTEX_INITIALIZER,
    .members_mu = PTHREAD_MUTEX_INITIALIZER,
};

static pthread_once_t init_guard = PTHREAD_ONCE_INIT;

static void shim_log(const char *fmt, ...)
{
    char buf[512];
    va_list ap;
    int n;

    if (G.log_fd < 0)
        return;
    va_start(ap, fmt);
    n = vsnprintf(buf, sizeof buf - 1, fmt, ap);
    va_end(ap);
    if (n < 0)
        return;
    if ((size_t)n > sizeof buf - 2)
        n = sizeof buf - 2;
    buf[n] = '\n';
    if (write(G.log_fd, buf, (size_t)n + 1) < 0) {
        /* logging is best effort */
    }
}

static void be32put(unsigned char *p, uint32_t v)
{
    p[0] = (unsigned char)(v >> 24);
    p[1] = (unsigned char)(v >> 16);
    p[2] = (unsigned char)(v >> 8);
    p[3] = (unsigned char)v;
}

static uint32_t be32get(const unsigned char *p)
{
    return ((uint32_t)p[0] << 24) | ((uint32_t)p[1] << 16)
         | ((uint32_t)p[2] << 8) | p[3];
}

static void be64put(unsigned char *p, uint64_t v)
{
    be32put(p, (uint32_t)(v >> 32));
    be32put(p + 4, (uint32_t)v);
}

static uint64_t be64get(const unsigned char *p)
{
    return ((uint64_t)be32get(p) << 32) | be32get(p + 4);
}

static int send_all(int fd, const unsigned char *buf, size_t n)
{
    while (n > 0) {
        ssize_t w = send(fd, buf, n, MSG_NOSIGNAL);
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

static int recv_exact(int fd, unsigned char *buf, size_t n)
{
    while (n > 0) {
        ssize_t r = recv(fd, buf, n, 0);
        if (r < 0) {
            if (errno == EINTR)
                continue;
            return -1;
        }
        if (r == 0)
            return -1;          /* broker hung up */
        buf += r;
        n -= (size_t)r;
    }
    return 0;
}

static void init_once(void)
{
    const char *ipc, *peers, *log_path;
    struct sockaddr_un sun;
    int fd;

    G.real_connect = (connect_fn)dlsym(RTLD_NEXT, "connect");
    G.real_bind = (bind_fn)dlsym(RTLD_NEXT, "bind");
    G.req_seq = (uint64_t)getpid() << 32;

    log_path = getenv("BOXER_SHIM_LOG");
    if (log_path && *log_path)
        G.log_fd = open(log_path, O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC,
                        0644);

    peers = getenv("BOXER_PEERS_FILE");
    if (peers)
        snprintf(G.peers_path, sizeof G.peers_path, "%s", peers);

    ipc = getenv("BOXER_IPC");
    if (!ipc || !*ipc) {
        shim_log("inactive: BOXER_IPC unset");
        return;
    }
    if (strlen(ipc) >= sizeof sun.sun_path) {
        shim_log("inactive: BOXER_IPC path too long");
        return;
    }
    fd = socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) {
        shim_log("inactive: socket: %s", strerror(errno));
        return;
    }
    memset(&sun, 0, sizeof sun);
    sun.sun_family = AF_UNIX;
    strcpy(sun.sun_path, ipc);
    if (G.real_connect(fd, (const struct sockaddr *)&sun, sizeof sun) != 0) {
        shim_log("inactive: %s unreachable: %s", ipc, strerror(errno));
        close(fd);
        return;
    }
    G.ipc_fd = fd;
    shim_log("active: broker at %s", ipc);
}

/* -- overlay membership ------------------------------------------------- */

static int members_contain(uint32_t ip_be)
{
    size_t i;

    for (i = 0; i < G.n_members; i++)
        if (G.member_ips[i] == ip_be)
            return 1;
    return 0;
}

/* Rebuild the member set from the peers file: "<id> <ip>:<port>" lines. */
static void load_members_locked(void)
{
    char line[128], ip[64];
    struct in_addr a;
    FILE *fh;

    G.n_members = 0;
    fh = fopen(G.peers_path, "r");
    if (!fh)
        return;
    while (fgets(line, sizeof line, fh)) {
        if (sscanf(line, "%*u %63[^:\n]:%*u", ip) != 1)
            continue;
        if (!inet_aton(ip, &a))
            continue;
        if (members_contain(a.s_addr))
            continue;
        if (G.n_members == G.cap_members) {
            size_t cap = G.cap_members ? G.cap_members * 2 : 16;
            uint32_t *grown = realloc(G.member_ips, cap * sizeof *grown);
            if (!grown)
                break;
            G.member_ips = grown;
            G.cap_members = cap;
        }
        G.member_ips[G.n_members++] = a.s_addr;
    }
    fclose(fh);
}

/* Membership decides routing only; cached, re-read from disk on a miss so
 * nodes that joined after us are still found. */
static int is_member(uint32_t ip_be)
{
    int hit;

    if (!G.peers_path[0])
        return 0;
    pthread_mutex_lock(&G.members_mu);
    hit = members_contain(ip_be);
    if (!hit) {
        load_members_locked();
        hit = members_contain(ip_be);
    }
    pthread_mutex_unlock(&G.members_mu);
    return hit;
}

/* -- broker requests ------------------------------------------------------ */

/* Ask the broker to set up dst for a connect from our src port.
 * Returns 0 on acknowledgement, the error code on a setup error, and -1
 * when the broker connection itself fails. */
static int broker_setup(const struct sockaddr_in *src,
                        const struct sockaddr_in *dst)
{
    unsigned char req[25], hdr[5], body[64];
    uint64_t req_id;
    uint32_t body_len;
    int rc = -1, rounds;

    pthread_mutex_lock(&G.ipc_mu);
    req_id = ++G.req_seq;
    be32put(req, 20);
    req[4] = TAG_NAT_SETUP_REQ;
    be64put(req + 5, req_id);
    memcpy(req + 13, &src->sin_addr.s_addr, 4);
    memcpy(req + 17, &src->sin_port, 2);
    memcpy(req + 19, &dst->sin_addr.s_addr, 4);
    memcpy(req + 23, &dst->sin_port, 2);
    if (send_all(G.ipc_fd, req, sizeof req) != 0)
        goto out;

    /* Requests are serialized, so the next matching reply is ours; skip
     * anything stale rather than wedging the application. */
    for (rounds = 0; rounds < 16; rounds++) {
        if (recv_exact(G.ipc_fd, hdr, 5) != 0)
            goto out;
        body_len = be32get(hdr);
        if (body_len > sizeof body)
            goto out;
        if (recv_exact(G.ipc_fd, body, body_len) != 0)
            goto out;
        if (hdr[4] == TAG_NAT_SETUP_ACK && body_len == 8
                && be64get(body) == req_id) {
            rc = 0;
            goto out;
        }
        if (hdr[4] == TAG_NAT_SETUP_ERR && body_len == 9
                && be64get(body) == req_id) {
            rc = body[8];
            goto out;
        }
    }
out:
    pthread_mutex_unlock(&G.ipc_mu);
    return rc;
}

static int broker_register(const struct sockaddr_in *local)
{
    unsigned char req[11];
    int rc;

    be32put(req, 6);
    req[4] = TAG_REGISTER_LISTENER;
    memcpy(req + 5, &local->sin_addr.s_addr, 4);
    memcpy(req + 9, &local->sin_port, 2);
    pthread_mutex_lock(&G.ipc_mu);
    rc = send_all(G.ipc_fd, req, sizeof req);
    pthread_mutex_unlock(&G.ipc_mu);
    return rc;
}

/* -- intercepted entry points -------------------------------------------- */

static int is_tcp(int fd)
{
    int type = 0;
    socklen_t len = sizeof type;

    if (getsockopt(fd, SOL_SOCKET, SO_TYPE, &type, &len) != 0)
        return 0;
    return type == SOCK_STREAM;
}

__attribute__((visibility("default")))
int connect(int fd, const struct sockaddr *addr, socklen_t addrlen)
{
    const struct sockaddr_in *dst;
    struct sockaddr_in local;
    socklen_t local_len;
    int rc;

    pthread_once(&init_guard, init_once);
    if (!G.real_connect) {
        errno = ENOSYS;
        return -1;
    }
    if (G.ipc_fd < 0 || !addr || addrlen < sizeof(struct sockaddr_in)
            || addr->sa_family != AF_INET || !is_tcp(fd))
        return G.real_connect(fd, addr, addrlen);

    dst = (const struct sockaddr_in *)addr;
    if (dst->sin_port == 0 || !is_member(dst->sin_addr.s_addr))
        return G.real_connect(fd, addr, addrlen);

    local_len = sizeof local;
    if (getsockname(fd, (struct sockaddr *)&local, &local_len) != 0)
        return G.real_connect(fd, addr, addrlen);
    if (local.sin_port == 0) {
        /* The broker needs our source port up front, so take the
         * kernel-assigned one now instead of during connect. */
        struct sockaddr_in any;

        memset(&any, 0, sizeof any);
        any.sin_family = AF_INET;
        if (G.real_bind(fd, (const struct sockaddr *)&any, sizeof any) != 0)
            return G.real_connect(fd, addr, addrlen);
        local_len = sizeof local;
        if (getsockname(fd, (struct sockaddr *)&local, &local_len) != 0)
            return G.real_connect(fd, addr, addrlen);
    }

    rc = broker_setup(&local, dst);
    if (rc == 0) {
        shim_log("connect fd=%d %s:%u brokered", fd, inet_ntoa(dst->sin_addr),
             ntohs(dst->sin_port));
        return G.real_connect(fd, addr, addrlen);
    }
    if (rc == ERR_UNKNOWN_DESTINATION) {
        shim_log("connect fd=%d %s:%u unknown destination, dialing natively",
             fd, inet_ntoa(dst->sin_addr), ntohs(dst->sin_port));
        return G.real_connect(fd, addr, addrlen);
    }
    shim_log("connect fd=%d %s:%u refused by broker (err=%d)", fd,
         inet_ntoa(dst->sin_addr), ntohs(dst->sin_port), rc);
    errno = ECONNREFUSED;
    return -1;
}

__attribute__((visibility("default")))
int bind(int fd, const struct sockaddr *addr, socklen_t addrlen)
{
    struct sockaddr_in local;
    socklen_t local_len;
    int one = 1, rc;

    pthread_once(&init_guard, init_once);
    if (!G.real_bind) {
        errno = ENOSYS;
        return -1;
    }
    if (G.ipc_fd < 0 || !addr || addrlen < sizeof(struct sockaddr_in)
            || addr->sa_family != AF_INET || !is_tcp(fd))
        return G.real_bind(fd, addr, addrlen);

    /* The broker punches by briefly sharing this port, which only works
     * when the application's socket allows it.  Observable through
     * getsockopt -- the one transparency exception. */
    (void)setsockopt(fd, SOL_SOCKET, SO_REUSEPORT, &one, sizeof one);
    rc = G.real_bind(fd, addr, addrlen);
    if (rc != 0)
        return rc;

    local_len = sizeof local;
    if (getsockname(fd, (struct sockaddr *)&local, &local_len) != 0)
        return 0;               /* bound, but nothing to register */
    if (broker_register(&local) != 0) {
        /* A listener the broker does not know about would dangle half
         * configured, so a dead broker connection fails the bind loudly. */
        shim_log("bind fd=%d registration failed, broker gone", fd);
        errno = ECONNREFUSED;
        return -1;
    }
    shim_log("bind fd=%d %s:%u registered", fd, inet_ntoa(local.sin_addr),
         ntohs(local.sin_port));
    return 0;
}
