fn main() {
    println!("cargo:rustc-link-search=native=/usr/lib/x86_64-linux-gnu/lapack");
    println!("cargo:rustc-link-search=native=/usr/lib/x86_64-linux-gnu/blas");
    println!("cargo:rustc-link-lib=static=lapack");
    println!("cargo:rustc-link-lib=static=blas");
    println!("cargo:rustc-link-lib=dylib=gfortran");
}
