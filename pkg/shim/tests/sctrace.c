/* Minimal syscall tracer: runs a command and logs "<nr> <arg0>" for every
 * syscall entry to a file, one line each.  Stands in for strace, which the
 * test environment does not ship.
 *
 * usage: sctrace OUTFILE CMD [ARGS...]
 *
 * Uses PTRACE_GET_SYSCALL_INFO (kernel 5.3+) to tell entries from exits;
 * the struct is declared locally so old libc headers do not matter.
 * Single process only -- the workloads it traces do not fork.  The
 * child's exit status is propagated.
 */
#include <errno.h>
#include <signal.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/ptrace.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#define SC_GET_SYSCALL_INFO 0x420e
#define SC_OP_ENTRY 1

struct sc_info {
    uint8_t op;
    uint8_t pad[3];
    uint32_t arch;
    uint64_t instruction_pointer;
    uint64_t stack_pointer;
    union {
        struct {
            uint64_t nr;
            uint64_t args[6];
        } entry;
        struct {
            int64_t rval;
            uint8_t is_error;
        } exit;
    } u;
};

int main(int argc, char **argv)
{
    FILE *out;
    pid_t pid;
    int status, sig = 0;

    if (argc < 3) {
        fprintf(stderr, "usage: sctrace OUTFILE CMD [ARGS...]\n");
        return 2;
    }
    out = fopen(argv[1], "w");
    if (!out) {
        perror("sctrace: open");
        return 2;
    }

    pid = fork();
    if (pid < 0) {
        perror("sctrace: fork");
        return 2;
    }
    if (pid == 0) {
        fclose(out);
        if (ptrace(PTRACE_TRACEME, 0, 0, 0) != 0)
            _exit(126);
        execvp(argv[2], argv + 2);
        _exit(127);
    }

    if (waitpid(pid, &status, 0) < 0 || !WIFSTOPPED(status)) {
        fprintf(stderr, "sctrace: child did not stop\n");
        return 2;
    }
    if (ptrace(PTRACE_SETOPTIONS, pid, 0,
               PTRACE_O_TRACESYSGOOD | PTRACE_O_EXITKILL) != 0) {
        perror("sctrace: setoptions");
        return 2;
    }

    for (;;) {
        if (ptrace(PTRACE_SYSCALL, pid, 0, sig) != 0)
            break;
        if (waitpid(pid, &status, 0) < 0)
            break;
        if (WIFEXITED(status)) {
            fclose(out);
            return WEXITSTATUS(status);
        }
        if (WIFSIGNALED(status)) {
            fclose(out);
            return 128 + WTERMSIG(status);
        }
        sig = 0;
        if (!WIFSTOPPED(status))
            continue;
        if (WSTOPSIG(status) == (SIGTRAP | 0x80)) {
            struct sc_info info;

            memset(&info, 0, sizeof info);
            if (ptrace(SC_GET_SYSCALL_INFO, pid, (void *)sizeof info,
                       &info) > 0 && info.op == SC_OP_ENTRY)
                fprintf(out, "%llu %llu\n",
                        (unsigned long long)info.u.entry.nr,
                        (unsigned long long)info.u.entry.args[0]);
        } else if (WSTOPSIG(status) != SIGTRAP) {
            sig = WSTOPSIG(status);        /* forward real signals */
        }
    }
    fclose(out);
    return 2;
}
