import { serve } from "./server";

serve(process.stdin, process.stdout).then((code) => {
  process.exitCode = code;
});
