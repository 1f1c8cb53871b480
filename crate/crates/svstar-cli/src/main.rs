fn main() {
    println!("svstar");
}
