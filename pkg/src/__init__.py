# ehvm: exception-handling VM and toolchain
