fn main() {
    println!("setrex");
}
